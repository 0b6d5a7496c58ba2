//! Layer-to-tile mapping and its occupancy metrics.
//!
//! Metric definitions (stated here because the source metrics are named but
//! not defined formally):
//!   - tile utilization: occupied cells / allocated tile cells, averaged with
//!     equal weight per tile;
//!   - reuse factor: MVM invocations a layer's tiles serve per single network
//!     input (one per output pixel for convolutions, one per token for
//!     token-wise linears, one for a pooled vector).
//! Bias vectors stay on the digital periphery and are not mapped to tiles.

use crate::analog::TileGeometry;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// The layer vocabulary sufficient for the toy pyramidal / isotropic zoo.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
        has_bias: bool,
    },
    /// Depthwise conv mapped as a single (kh*kw) x C block of C independent
    /// columns rather than C separate tiles.
    DepthwiseConv2d {
        channels: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
        has_bias: bool,
    },
    Linear {
        in_features: usize,
        out_features: usize,
        has_bias: bool,
    },
    PatchEmbed {
        in_ch: usize,
        patch: usize,
        embed_dim: usize,
        has_bias: bool,
    },
    AttentionProj {
        in_features: usize,
        out_features: usize,
        has_bias: bool,
    },
}

/// Shape of the activation a layer consumes, for reuse-factor computation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputShape {
    /// C x H x W image (or token grid with C channels).
    Image { c: usize, h: usize, w: usize },
    /// Token sequence of length t with f features each.
    Tokens { t: usize, f: usize },
    /// Single pooled vector.
    Vector { f: usize },
}

impl LayerSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            LayerSpec::Conv2d { in_ch, out_ch, kh, kw, stride, .. } => {
                in_ch > 0 && out_ch > 0 && kh > 0 && kw > 0 && stride > 0
            }
            LayerSpec::DepthwiseConv2d { channels, kh, kw, stride, .. } => {
                channels > 0 && kh > 0 && kw > 0 && stride > 0
            }
            LayerSpec::Linear { in_features, out_features, .. } => in_features > 0 && out_features > 0,
            LayerSpec::PatchEmbed { in_ch, patch, embed_dim, .. } => {
                in_ch > 0 && patch > 0 && embed_dim > 0
            }
            LayerSpec::AttentionProj { in_features, out_features, .. } => {
                in_features > 0 && out_features > 0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::mapping(format!("non-positive dimension in {self:?}")))
        }
    }

    /// Weight + bias element count.
    pub fn param_count(&self) -> usize {
        let (rows, cols) = self.weight_matrix_shape();
        let bias = match *self {
            LayerSpec::Conv2d { out_ch, has_bias, .. } => has_bias.then_some(out_ch),
            LayerSpec::DepthwiseConv2d { channels, has_bias, .. } => has_bias.then_some(channels),
            LayerSpec::Linear { out_features, has_bias, .. }
            | LayerSpec::AttentionProj { out_features, has_bias, .. } => has_bias.then_some(out_features),
            LayerSpec::PatchEmbed { embed_dim, has_bias, .. } => has_bias.then_some(embed_dim),
        };
        rows * cols + bias.unwrap_or(0)
    }

    /// Matrix view of the layer's weights: (rows consumed, columns produced).
    pub fn weight_matrix_shape(&self) -> (usize, usize) {
        match *self {
            LayerSpec::Conv2d { in_ch, out_ch, kh, kw, .. } => (in_ch * kh * kw, out_ch),
            LayerSpec::DepthwiseConv2d { channels, kh, kw, .. } => (kh * kw, channels),
            LayerSpec::Linear { in_features, out_features, .. }
            | LayerSpec::AttentionProj { in_features, out_features, .. } => (in_features, out_features),
            LayerSpec::PatchEmbed { in_ch, patch, embed_dim, .. } => (in_ch * patch * patch, embed_dim),
        }
    }

    /// MVM invocations against this layer's tiles per single network input.
    pub fn reuse_factor(&self, input: InputShape) -> Result<usize> {
        use crate::tensor::conv_out_dim;
        match (*self, input) {
            (LayerSpec::Conv2d { in_ch, kh, kw, stride, pad, .. }, InputShape::Image { c, h, w }) => {
                if c != in_ch {
                    return Err(Error::shape(format!("conv2d expects {in_ch} channels, got {c}")));
                }
                let ho = conv_out_dim(h, kh, stride, pad)
                    .ok_or_else(|| Error::shape("conv2d: empty output"))?;
                let wo = conv_out_dim(w, kw, stride, pad)
                    .ok_or_else(|| Error::shape("conv2d: empty output"))?;
                Ok(ho * wo)
            }
            (LayerSpec::DepthwiseConv2d { channels, kh, kw, stride, pad, .. }, InputShape::Image { c, h, w }) => {
                if c != channels {
                    return Err(Error::shape("depthwise channel mismatch"));
                }
                let ho = conv_out_dim(h, kh, stride, pad)
                    .ok_or_else(|| Error::shape("depthwise: empty output"))?;
                let wo = conv_out_dim(w, kw, stride, pad)
                    .ok_or_else(|| Error::shape("depthwise: empty output"))?;
                Ok(ho * wo)
            }
            (LayerSpec::PatchEmbed { in_ch, patch, .. }, InputShape::Image { c, h, w }) => {
                if c != in_ch || h % patch != 0 || w % patch != 0 {
                    return Err(Error::shape("patch_embed: input not divisible by patch"));
                }
                Ok((h / patch) * (w / patch))
            }
            (LayerSpec::Linear { in_features, .. }, InputShape::Tokens { t, f })
            | (LayerSpec::AttentionProj { in_features, .. }, InputShape::Tokens { t, f }) => {
                if f != in_features {
                    return Err(Error::shape("linear feature mismatch"));
                }
                Ok(t)
            }
            (LayerSpec::Linear { in_features, .. }, InputShape::Vector { f })
            | (LayerSpec::AttentionProj { in_features, .. }, InputShape::Vector { f }) => {
                if f != in_features {
                    return Err(Error::shape("linear feature mismatch"));
                }
                Ok(1)
            }
            _ => Err(Error::shape("input shape incompatible with layer kind")),
        }
    }
}

/// Half-open index ranges of one block within the weight matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub row_start: usize,
    pub row_end: usize,
    pub col_start: usize,
    pub col_end: usize,
}

impl Block {
    pub fn rows(&self) -> usize {
        self.row_end - self.row_start
    }
    pub fn cols(&self) -> usize {
        self.col_end - self.col_start
    }
    pub fn area(&self) -> usize {
        self.rows() * self.cols()
    }
}

/// Row-major ceiling grid partition; edge blocks are ragged and blocks
/// exactly tile the rows x cols matrix.
pub fn partition(rows: usize, cols: usize, tile: TileGeometry) -> Vec<Block> {
    let mut blocks = Vec::new();
    let mut r = 0;
    while r < rows {
        let r_end = (r + tile.rows).min(rows);
        let mut c = 0;
        while c < cols {
            let c_end = (c + tile.cols).min(cols);
            blocks.push(Block {
                row_start: r,
                row_end: r_end,
                col_start: c,
                col_end: c_end,
            });
            c = c_end;
        }
        r = r_end;
    }
    blocks
}

/// The partition of one layer's weight matrix onto tiles.
#[derive(Clone, Debug, Serialize)]
pub struct TileMapping {
    pub layer_id: String,
    pub layer: LayerSpec,
    pub weight_rows: usize,
    pub weight_cols: usize,
    pub tile: TileGeometry,
    pub blocks: Vec<Block>,
    pub tiles_used: usize,
    pub utilization: f64,
    pub reuse: usize,
}

/// Map one layer onto tiles and compute its metrics.
pub fn map_layer(
    layer_id: impl Into<String>,
    layer: LayerSpec,
    tile: TileGeometry,
    input: InputShape,
) -> Result<TileMapping> {
    layer.validate()?;
    let (rows, cols) = layer.weight_matrix_shape();
    let blocks = partition(rows, cols, tile);
    let tiles_used = blocks.len();
    let reuse = layer.reuse_factor(input)?;
    let mapping = TileMapping {
        layer_id: layer_id.into(),
        layer,
        weight_rows: rows,
        weight_cols: cols,
        tile,
        blocks,
        tiles_used,
        utilization: 0.0,
        reuse,
    };
    let utilization = utilization(&mapping);
    Ok(TileMapping { utilization, ..mapping })
}

/// Occupied cells over allocated cells across the mapping's tiles.
pub fn utilization(mapping: &TileMapping) -> f64 {
    let used = (mapping.weight_rows * mapping.weight_cols) as f64;
    used / (mapping.tiles_used as f64 * mapping.tile.rows as f64 * mapping.tile.cols as f64)
}

/// Per-network mapping summary: the three headline columns for any preset.
#[derive(Clone, Debug, Serialize)]
pub struct NetworkReport {
    pub layers: Vec<TileMapping>,
    /// Tile-weighted mean utilization (== used cells / allocated cells).
    pub avg_utilization: f64,
    /// Tile-weighted mean of each tile's layer reuse factor.
    pub avg_reuse: f64,
    pub total_params: usize,
    pub total_tiles: usize,
}

/// Aggregate per-layer mappings into the network-level report.
///
/// `total_params` must be supplied by the caller (bias elements count toward
/// parameters even though they are not mapped to tiles).
pub fn aggregate_report(layers: Vec<TileMapping>, total_params: usize) -> NetworkReport {
    let total_tiles: usize = layers.iter().map(|l| l.tiles_used).sum();
    let used_cells: usize = layers.iter().map(|l| l.weight_rows * l.weight_cols).sum();
    let alloc_cells: f64 = layers
        .iter()
        .map(|l| (l.tiles_used * l.tile.rows * l.tile.cols) as f64)
        .sum();
    let avg_utilization = if alloc_cells > 0.0 {
        used_cells as f64 / alloc_cells
    } else {
        0.0
    };
    let reuse_sum: f64 = layers.iter().map(|l| (l.tiles_used * l.reuse) as f64).sum();
    let avg_reuse = if total_tiles > 0 {
        reuse_sum / total_tiles as f64
    } else {
        0.0
    };
    NetworkReport {
        layers,
        avg_utilization,
        avg_reuse,
        total_params,
        total_tiles,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tile(r: usize, c: usize) -> TileGeometry {
        TileGeometry { rows: r, cols: c }
    }

    #[test]
    fn weight_matrix_shapes() {
        let conv = LayerSpec::Conv2d { in_ch: 3, out_ch: 16, kh: 3, kw: 3, stride: 1, pad: 1, has_bias: true };
        assert_eq!(conv.weight_matrix_shape(), (27, 16));
        let lin = LayerSpec::Linear { in_features: 512, out_features: 512, has_bias: true };
        assert_eq!(lin.weight_matrix_shape(), (512, 512));
        let pe = LayerSpec::PatchEmbed { in_ch: 1, patch: 4, embed_dim: 32, has_bias: true };
        assert_eq!(pe.weight_matrix_shape(), (16, 32));
        let dw = LayerSpec::DepthwiseConv2d { channels: 8, kh: 3, kw: 3, stride: 1, pad: 1, has_bias: true };
        assert_eq!(dw.weight_matrix_shape(), (9, 8));
    }

    #[test]
    fn partition_600_on_512() {
        let blocks = partition(600, 600, tile(512, 512));
        assert_eq!(blocks.len(), 4);
        let dims: Vec<(usize, usize)> = blocks.iter().map(|b| (b.rows(), b.cols())).collect();
        assert_eq!(dims, vec![(512, 512), (512, 88), (88, 512), (88, 88)]);
    }

    #[test]
    fn partition_exact_fit() {
        let blocks = partition(512, 512, tile(512, 512));
        assert_eq!(blocks.len(), 1);
        assert_eq!(blocks[0].area(), 512 * 512);
    }

    #[test]
    fn partition_covers_exactly() {
        // Cell-by-cell coverage oracle on random shapes.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let rows = rng.gen_range(1..80);
            let cols = rng.gen_range(1..80);
            let tr = rng.gen_range(1..40);
            let tc = rng.gen_range(1..40);
            let blocks = partition(rows, cols, tile(tr, tc));
            let mut hits = vec![0u8; rows * cols];
            for b in &blocks {
                assert!(b.rows() <= tr && b.cols() <= tc);
                for r in b.row_start..b.row_end {
                    for c in b.col_start..b.col_end {
                        hits[r * cols + c] += 1;
                    }
                }
            }
            assert!(hits.iter().all(|&h| h == 1), "not an exact disjoint cover");
            let area: usize = blocks.iter().map(|b| b.area()).sum();
            assert_eq!(area, rows * cols);
        }
    }

    #[test]
    fn utilization_worked_examples() {
        let lin = LayerSpec::Linear { in_features: 512, out_features: 512, has_bias: false };
        let m = map_layer("lin", lin, tile(512, 512), InputShape::Vector { f: 512 }).unwrap();
        assert!((m.utilization - 1.0).abs() < 1e-12);

        let conv = LayerSpec::Conv2d { in_ch: 3, out_ch: 16, kh: 3, kw: 3, stride: 1, pad: 1, has_bias: false };
        let m = map_layer("conv", conv, tile(512, 512), InputShape::Image { c: 3, h: 8, w: 8 }).unwrap();
        assert!((m.utilization - 432.0 / 262144.0).abs() < 1e-12);

        let lin600 = LayerSpec::Linear { in_features: 600, out_features: 600, has_bias: false };
        let m = map_layer("lin600", lin600, tile(512, 512), InputShape::Vector { f: 600 }).unwrap();
        assert!((m.utilization - 360000.0 / (4.0 * 262144.0)).abs() < 1e-12);
    }

    #[test]
    fn reuse_factors() {
        let conv = LayerSpec::Conv2d { in_ch: 8, out_ch: 8, kh: 3, kw: 3, stride: 1, pad: 1, has_bias: true };
        assert_eq!(conv.reuse_factor(InputShape::Image { c: 8, h: 64, w: 64 }).unwrap(), 4096);
        let lin = LayerSpec::Linear { in_features: 32, out_features: 1, has_bias: true };
        assert_eq!(lin.reuse_factor(InputShape::Vector { f: 32 }).unwrap(), 1);
        let pe = LayerSpec::PatchEmbed { in_ch: 1, patch: 4, embed_dim: 32, has_bias: true };
        assert_eq!(pe.reuse_factor(InputShape::Image { c: 1, h: 32, w: 32 }).unwrap(), 64);
    }

    #[test]
    fn reuse_invariant_to_tile_geometry() {
        let conv = LayerSpec::Conv2d { in_ch: 4, out_ch: 4, kh: 3, kw: 3, stride: 1, pad: 1, has_bias: true };
        let input = InputShape::Image { c: 4, h: 16, w: 16 };
        let m1 = map_layer("c", conv, tile(512, 512), input).unwrap();
        let m2 = map_layer("c", conv, tile(16, 16), input).unwrap();
        assert_eq!(m1.reuse, m2.reuse);
    }

    #[test]
    fn single_layer_report() {
        let lin = LayerSpec::Linear { in_features: 512, out_features: 512, has_bias: true };
        let m = map_layer("lin", lin, tile(512, 512), InputShape::Vector { f: 512 }).unwrap();
        let report = aggregate_report(vec![m], lin.param_count());
        assert!((report.avg_utilization - 1.0).abs() < 1e-12);
        assert!((report.avg_reuse - 1.0).abs() < 1e-12);
        assert_eq!(report.total_params, 512 * 512 + 512);
        assert_eq!(report.total_tiles, 1);
    }

    #[test]
    fn report_matches_brute_force_cell_count() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let layers: Vec<TileMapping> = (0..rng.gen_range(1..5))
                .map(|i| {
                    let inf = rng.gen_range(1..300);
                    let outf = rng.gen_range(1..300);
                    let lin = LayerSpec::Linear { in_features: inf, out_features: outf, has_bias: false };
                    map_layer(format!("l{i}"), lin, tile(128, 128), InputShape::Vector { f: inf }).unwrap()
                })
                .collect();
            let used: usize = layers.iter().map(|l| l.weight_rows * l.weight_cols).sum();
            let alloc: usize = layers.iter().map(|l| l.tiles_used * 128 * 128).sum();
            let report = aggregate_report(layers, 0);
            assert!((report.avg_utilization - used as f64 / alloc as f64).abs() < 1e-12);
            assert!(report.avg_utilization > 0.0 && report.avg_utilization <= 1.0);
        }
    }

    #[test]
    fn invalid_layer_rejected() {
        let bad = LayerSpec::Conv2d { in_ch: 0, out_ch: 4, kh: 3, kw: 3, stride: 1, pad: 1, has_bias: false };
        assert!(bad.validate().is_err());
    }
}
