//! Fixed square tiling of a registered board and the mapping between board
//! and region coordinates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{BinaryMask, Raster, Resample};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionSpec {
    /// `grid{col}_{row}`, 1-based.
    pub region_id: String,
    pub x0: usize,
    pub y0: usize,
    pub side: usize,
}

impl RegionSpec {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x0..self.x0 + self.side).contains(&x) && (self.y0..self.y0 + self.side).contains(&y)
    }

    fn check(&self, board_w: usize, board_h: usize) -> Result<()> {
        if self.side == 0 || self.x0 + self.side > board_w || self.y0 + self.side > board_h {
            return Err(Error::Argument(format!(
                "region {} ({}+{}, {}+{}) exceeds the {board_w}x{board_h} board",
                self.region_id, self.x0, self.side, self.y0, self.side
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionGrid {
    pub board_w: usize,
    pub board_h: usize,
    pub side: usize,
    /// Column-major: all rows of column 1, then column 2, ...
    pub regions: Vec<RegionSpec>,
}

impl RegionGrid {
    pub fn get(&self, region_id: &str) -> Option<&RegionSpec> {
        self.regions.iter().find(|r| r.region_id == region_id)
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }
}

/// Anchors `0, side, 2*side, ...` plus a trailing `len - side` when `side` does not divide `len`.
pub fn axis_anchors(len: usize, side: usize) -> Vec<usize> {
    let mut anchors: Vec<usize> = (0..)
        .map(|i| i * side)
        .take_while(|a| a + side <= len)
        .collect();
    if len % side != 0 {
        anchors.push(len - side);
    }
    anchors
}

pub fn build_grid(board_w: usize, board_h: usize, side: usize) -> Result<RegionGrid> {
    if side == 0 || board_w < side || board_h < side {
        return Err(Error::Argument(format!(
            "board {board_w}x{board_h} is smaller than the region side {side}"
        )));
    }
    let rows = axis_anchors(board_h, side);
    let regions = axis_anchors(board_w, side)
        .into_iter()
        .enumerate()
        .flat_map(|(c, x0)| {
            rows.iter().enumerate().map(move |(r, &y0)| RegionSpec {
                region_id: format!("grid{}_{}", c + 1, r + 1),
                x0,
                y0,
                side,
            })
        })
        .collect();
    Ok(RegionGrid {
        board_w,
        board_h,
        side,
        regions,
    })
}

/// Crops the region and resizes it to `out_side` square.
pub fn extract_region(board: &Raster, spec: &RegionSpec, out_side: usize) -> Result<Raster> {
    extract_region_shifted(board, spec, 0, 0, out_side)
}

/// Like [`extract_region`] with the anchor moved by `(dx, dy)`, clamped to the board.
pub fn extract_region_shifted(
    board: &Raster,
    spec: &RegionSpec,
    dx: isize,
    dy: isize,
    out_side: usize,
) -> Result<Raster> {
    spec.check(board.width(), board.height())?;
    let x0 = (spec.x0 as isize + dx).clamp(0, (board.width() - spec.side) as isize) as usize;
    let y0 = (spec.y0 as isize + dy).clamp(0, (board.height() - spec.side) as isize) as usize;
    board
        .crop(y0, x0, spec.side, spec.side)?
        .resize_bilinear(out_side, out_side)
}

/// Board-space mask cropped to the region and resized (nearest) to `out_side`.
pub fn extract_region_mask(
    mask: &BinaryMask,
    spec: &RegionSpec,
    out_side: usize,
) -> Result<BinaryMask> {
    spec.check(mask.width(), mask.height())?;
    BinaryMask::from_fn(spec.side, spec.side, |y, x| {
        mask.get(spec.y0 + y, spec.x0 + x)
    })
    .resize_nearest(out_side, out_side)
}

/// Upscales a region mask (nearest neighbour) into a fresh board-sized mask.
pub fn mask_to_board(
    region_mask: &BinaryMask,
    spec: &RegionSpec,
    board_w: usize,
    board_h: usize,
) -> Result<BinaryMask> {
    let mut board = BinaryMask::zeros(board_h, board_w);
    paint_region_mask(&mut board, region_mask, spec)?;
    Ok(board)
}

/// ORs an upscaled region mask into an existing board mask.
pub fn paint_region_mask(
    board: &mut BinaryMask,
    region_mask: &BinaryMask,
    spec: &RegionSpec,
) -> Result<()> {
    spec.check(board.width(), board.height())?;
    if region_mask.height() != region_mask.width() {
        return Err(Error::Argument("region masks are square".into()));
    }
    let up = region_mask.resize_nearest(spec.side, spec.side)?;
    for y in 0..spec.side {
        for x in 0..spec.side {
            if up.get(y, x) {
                board.set(spec.y0 + y, spec.x0 + x, true);
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::ColorSpace;

    #[test]
    fn board_geometry_of_the_gas_pump_images() {
        let g = build_grid(4096, 2816, 1024).unwrap();
        assert_eq!(g.len(), 12);
        let mut xs: Vec<usize> = g.regions.iter().map(|r| r.x0).collect();
        xs.dedup();
        assert_eq!(xs, vec![0, 1024, 2048, 3072]);
        let ys: Vec<usize> = g.regions.iter().take(3).map(|r| r.y0).collect();
        assert_eq!(ys, vec![0, 1024, 1792]);
        assert_eq!(g.regions[0].region_id, "grid1_1");
        assert_eq!(g.regions[1].region_id, "grid1_2");
        assert_eq!(g.regions[11].region_id, "grid4_3");
        assert!(g.get("grid2_2").is_some());
    }

    #[test]
    fn exact_division_and_trailing_anchor() {
        assert_eq!(build_grid(2048, 2048, 1024).unwrap().len(), 4);
        let g = build_grid(2500, 1024, 1024).unwrap();
        let xs: Vec<usize> = g.regions.iter().map(|r| r.x0).collect();
        assert_eq!(xs, vec![0, 1024, 1476]);
        assert!(build_grid(1000, 2000, 1024).is_err());
    }

    #[test]
    fn extract_locality_and_constant() {
        let board = Raster::filled(40, 60, ColorSpace::Gray, 0.25).unwrap();
        let spec = RegionSpec {
            region_id: "grid1_1".into(),
            x0: 20,
            y0: 8,
            side: 32,
        };
        let r = extract_region(&board, &spec, 16).unwrap();
        assert!(r.pixels().iter().all(|&v| v == 0.25));
        let mut board = Raster::filled(40, 60, ColorSpace::Gray, 0.0).unwrap();
        board.set(8, 20, 0, 1.0);
        let r = extract_region(&board, &spec, 32).unwrap();
        assert_eq!(r.get(0, 0, 0), 1.0);
        assert_eq!(r.pixels().iter().filter(|&&v| v > 0.0).count(), 1);
    }

    #[test]
    fn region_mask_round_trips_through_the_board() {
        let spec = RegionSpec {
            region_id: "grid1_1".into(),
            x0: 20,
            y0: 8,
            side: 32,
        };
        let region = BinaryMask::from_fn(8, 8, |y, x| y < 2 && x >= 5);
        let board = mask_to_board(&region, &spec, 100, 40).unwrap();
        assert_eq!(extract_region_mask(&board, &spec, 8).unwrap(), region);
        let off = RegionSpec { x0: 60, ..spec };
        assert!(extract_region_mask(&board, &off, 8).unwrap().is_empty());
        let outside = RegionSpec { x0: 80, ..off };
        assert!(extract_region_mask(&board, &outside, 8).is_err());
    }

    #[test]
    fn block_average_at_scale_four() {
        // 4x4 blocks of distinct constants: half-pixel bilinear at scale 4
        // samples the exact block centres, so each output pixel sees its block.
        let mut board = Raster::filled(16, 16, ColorSpace::Gray, 0.0).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                board.set(y, x, 0, ((y / 4) * 4 + x / 4) as f32 / 16.0);
            }
        }
        let spec = RegionSpec {
            region_id: "grid1_1".into(),
            x0: 0,
            y0: 0,
            side: 16,
        };
        let r = extract_region(&board, &spec, 4).unwrap();
        for by in 0..4 {
            for bx in 0..4 {
                assert!((r.get(by, bx, 0) - (by * 4 + bx) as f32 / 16.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn mask_placement_and_or() {
        let spec = RegionSpec {
            region_id: "a".into(),
            x0: 0,
            y0: 0,
            side: 1024,
        };
        let full = BinaryMask::from_fn(256, 256, |_, _| true);
        assert_eq!(
            mask_to_board(&full, &spec, 2048, 1500)
                .unwrap()
                .count_ones(),
            1024 * 1024
        );
        let empty = BinaryMask::zeros(256, 256);
        assert!(mask_to_board(&empty, &spec, 2048, 1500).unwrap().is_empty());

        // Two regions overlapping in columns 6..8, each marking that strip.
        let a = RegionSpec {
            region_id: "a".into(),
            x0: 0,
            y0: 0,
            side: 8,
        };
        let b = RegionSpec {
            region_id: "b".into(),
            x0: 6,
            y0: 0,
            side: 8,
        };
        let ma = BinaryMask::from_fn(8, 8, |_, x| x >= 6);
        let mb = BinaryMask::from_fn(8, 8, |_, x| x < 2);
        let mut board = BinaryMask::zeros(8, 14);
        paint_region_mask(&mut board, &ma, &a).unwrap();
        paint_region_mask(&mut board, &mb, &b).unwrap();
        let expected: std::collections::HashSet<(usize, usize)> =
            (0..8).flat_map(|y| (6..8).map(move |x| (y, x))).collect();
        let got: std::collections::HashSet<(usize, usize)> = (0..8)
            .flat_map(|y| (0..14).map(move |x| (y, x)))
            .filter(|&(y, x)| board.get(y, x))
            .collect();
        assert_eq!(got, expected);
    }
}
