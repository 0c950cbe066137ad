//! Binary greymap (P5) output and the completion-grid layout.
//!
//! Grid: one column per context set. Row 0 shows the context with
//! unobserved pixels at [`SENTINEL_GRAY`], then one row per posterior
//! sample, then a row of per-pixel standard deviations scaled by their
//! global maximum. Tiles are separated by 1-pixel white lines. The ground
//! truth, downsampled by two, is inset in the top-right corner of the
//! top-right tile.

use std::path::Path;

use thiserror::Error;

pub const SENTINEL_GRAY: u8 = 128;
const SEPARATOR: u8 = 255;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("image has {found} pixels, expected {expected}")]
    Dimension { expected: usize, found: usize },
    #[error("columns disagree on sample count ({0} vs {1})")]
    SampleCount(usize, usize),
    #[error("nothing to render")]
    Empty,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// 8-bit greyscale raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Greymap {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Greymap {
    pub fn new(width: usize, height: usize, fill: u8) -> Self {
        Greymap {
            width,
            height,
            pixels: vec![fill; width * height],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * self.width + col]
    }

    fn set(&mut self, row: usize, col: usize, v: u8) {
        self.pixels[row * self.width + col] = v;
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn write(&self, path: &Path) -> Result<(), RenderError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }
}

/// One column of the grid.
#[derive(Clone, Debug)]
pub struct GridColumn<'a> {
    /// Observed intensity per pixel, `None` where unobserved.
    pub context: &'a [Option<f64>],
    pub samples: &'a [Vec<f64>],
    pub std: &'a [f64],
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn render_grid(
    height: usize,
    width: usize,
    columns: &[GridColumn<'_>],
    ground_truth: Option<&[f64]>,
) -> Result<Greymap, RenderError> {
    let first = columns.first().ok_or(RenderError::Empty)?;
    let k = first.samples.len();
    let n = height * width;
    let check = |len: usize| {
        if len != n {
            Err(RenderError::Dimension { expected: n, found: len })
        } else {
            Ok(())
        }
    };
    for c in columns {
        if c.samples.len() != k {
            return Err(RenderError::SampleCount(k, c.samples.len()));
        }
        check(c.context.len())?;
        check(c.std.len())?;
        for s in c.samples {
            check(s.len())?;
        }
    }
    if let Some(gt) = ground_truth {
        check(gt.len())?;
    }

    let rows = k + 2;
    let cols = columns.len();
    let mut out = Greymap::new(cols * width + cols - 1, rows * height + rows - 1, SEPARATOR);
    let origin = |r: usize, c: usize| (r * (height + 1), c * (width + 1));
    let blit = |out: &mut Greymap, r: usize, c: usize, px: &dyn Fn(usize) -> u8| {
        let (y0, x0) = origin(r, c);
        for i in 0..n {
            out.set(y0 + i / width, x0 + i % width, px(i));
        }
    };

    let std_max = columns
        .iter()
        .flat_map(|c| c.std.iter().copied())
        .fold(0.0f64, f64::max);
    for (ci, col) in columns.iter().enumerate() {
        blit(&mut out, 0, ci, &|i| col.context[i].map_or(SENTINEL_GRAY, to_byte));
        for (si, s) in col.samples.iter().enumerate() {
            blit(&mut out, si + 1, ci, &|i| to_byte(s[i]));
        }
        let scale = if std_max > 0.0 { 1.0 / std_max } else { 0.0 };
        blit(&mut out, k + 1, ci, &|i| to_byte(col.std[i] * scale));
    }

    if let Some(gt) = ground_truth {
        let (ih, iw) = (height / 2, width / 2);
        let (y0, x0) = origin(0, cols - 1);
        let x0 = x0 + width - iw;
        for r in 0..ih {
            for c in 0..iw {
                let mut acc = 0.0;
                for (dr, dc) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    acc += gt[(2 * r + dr) * width + 2 * c + dc];
                }
                out.set(y0 + r, x0 + c, to_byte(acc / 4.0));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_for_three_samples() {
        let ctx: Vec<Option<f64>> = (0..784).map(|i| if i == 0 { Some(1.0) } else { None }).collect();
        let samples = vec![vec![0.5; 784]; 3];
        let std = vec![0.0; 784];
        let col = GridColumn {
            context: &ctx,
            samples: &samples,
            std: &std,
        };
        let g = render_grid(28, 28, &[col], None).unwrap();
        assert_eq!((g.width, g.height), (28, 5 * 28 + 4));
        assert_eq!(g.get(0, 0), 255);
        assert_eq!(g.get(0, 1), SENTINEL_GRAY);
        assert_eq!(g.get(28, 0), SEPARATOR);
        assert_eq!(g.get(29, 5), 128);
        // zero std renders black
        for r in 4 * 29..4 * 29 + 28 {
            for c in 0..28 {
                assert_eq!(g.get(r, c), 0);
            }
        }
        let bytes = g.to_bytes();
        assert!(bytes.starts_with(b"P5\n28 144\n255\n"));
        assert_eq!(bytes.len(), 14 + 28 * 144);
    }

    #[test]
    fn std_is_scaled_by_global_max_and_truth_is_inset() {
        let ctx = vec![None; 16];
        let samples = vec![vec![0.0; 16]];
        let std_a = vec![0.1; 16];
        let std_b = vec![0.2; 16];
        let truth = vec![1.0; 16];
        let cols = [
            GridColumn {
                context: &ctx,
                samples: &samples,
                std: &std_a,
            },
            GridColumn {
                context: &ctx,
                samples: &samples,
                std: &std_b,
            },
        ];
        let g = render_grid(4, 4, &cols, Some(&truth)).unwrap();
        assert_eq!(g.width, 9);
        assert_eq!(g.get(10, 0), 128);
        assert_eq!(g.get(10, 5), 255);
        // inset: top-right 2x2 of tile (0, 1)
        assert_eq!(g.get(0, 7), 255);
        assert_eq!(g.get(1, 8), 255);
        assert_eq!(g.get(0, 5), SENTINEL_GRAY);
        assert_eq!(g.get(2, 8), SENTINEL_GRAY);
    }

    #[test]
    fn mismatched_dims_are_rejected() {
        let ctx = vec![None; 16];
        let samples = vec![vec![0.0; 15]];
        let std = vec![0.0; 16];
        let col = GridColumn {
            context: &ctx,
            samples: &samples,
            std: &std,
        };
        assert!(matches!(
            render_grid(4, 4, &[col], None),
            Err(RenderError::Dimension { .. })
        ));
    }
}
