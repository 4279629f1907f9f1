use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FastWeights, LabeledInput, Model, Session};
use crate::srwm::Block;

pub const SNAPSHOT_HEADER: &str = "step,layer,head,block,row,col,value";

/// Which fast-weight sub-blocks to dump. `None` selects everything.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SnapshotSelection {
    #[serde(default)]
    pub layers: Option<Vec<usize>>,
    #[serde(default)]
    pub heads: Option<Vec<usize>>,
    #[serde(default)]
    pub blocks: Option<Vec<Block>>,
}

impl SnapshotSelection {
    /// Every layer, first head, all four blocks.
    pub fn first_head() -> Self {
        Self { layers: None, heads: Some(vec![0]), blocks: None }
    }

    fn resolve(&self, n_layers: usize, n_heads: usize) -> Result<(Vec<usize>, Vec<usize>, Vec<Block>)> {
        let pick = |sel: &Option<Vec<usize>>, n: usize, what: &str| -> Result<Vec<usize>> {
            match sel {
                None => Ok((0..n).collect()),
                Some(v) if v.is_empty() => Err(Error::config(format!("empty {what} selection"))),
                Some(v) => match v.iter().find(|&&i| i >= n) {
                    Some(i) => Err(Error::config(format!("{what} {i} out of range (model has {n})"))),
                    None => Ok(v.clone()),
                },
            }
        };
        let blocks = match &self.blocks {
            None => Block::ALL.to_vec(),
            Some(b) if b.is_empty() => return Err(Error::config("empty block selection")),
            Some(b) => b.clone(),
        };
        Ok((pick(&self.layers, n_layers, "layer")?, pick(&self.heads, n_heads, "head")?, blocks))
    }

    /// Number of `(layer, head, block)` series the selection produces.
    pub fn series_count(&self, n_layers: usize, n_heads: usize) -> Result<usize> {
        let (l, h, b) = self.resolve(n_layers, n_heads)?;
        Ok(l.len() * h.len() * b.len())
    }
}

/// Runs `stream` through `model` and writes the selected fast-weight
/// sub-blocks after 0, `stride`, `2·stride`, … inputs as CSV. Returns the
/// number of snapshots taken.
pub fn dump_weight_snapshots<W: Write>(
    model: &Model,
    stream: &[LabeledInput],
    stride: usize,
    selection: &SnapshotSelection,
    out: &mut W,
) -> Result<usize> {
    if stride == 0 {
        return Err(Error::config("snapshot stride must be positive"));
    }
    let cfg = model.config();
    let (layers, heads, blocks) = selection.resolve(cfg.n_layers, cfg.n_heads)?;
    let dims = model.srwm_dims();
    let io = |e| Error::io("<snapshot output>", e);

    let write_snapshot = |out: &mut W, step: usize, fw: &FastWeights| -> Result<()> {
        for &l in &layers {
            for &h in &heads {
                let w = &fw.layers[l][h];
                for &b in &blocks {
                    for r in dims.block_range(b) {
                        let local = r - dims.block_range(b).start;
                        for c in 0..w.cols() {
                            writeln!(out, "{step},{l},{h},{},{local},{c},{}", b.name(), w.at(r, c)).map_err(io)?;
                        }
                    }
                }
            }
        }
        Ok(())
    };

    writeln!(out, "{SNAPSHOT_HEADER}").map_err(io)?;
    let mut session = Session::new(model);
    write_snapshot(out, 0, &session.fast_weights())?;
    let mut taken = 1;
    for (t, item) in stream.iter().enumerate() {
        session.observe_logits(&item.x, item.y)?;
        if (t + 1) % stride == 0 {
            write_snapshot(out, t + 1, &session.fast_weights())?;
            taken += 1;
        }
    }
    Ok(taken)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn hundred_twenty_eight_series_for_default_scale() {
        let all = SnapshotSelection::default();
        assert_eq!(all.series_count(2, 16).unwrap(), 128);
        assert_eq!(SnapshotSelection::first_head().series_count(2, 16).unwrap(), 8);
        let bad = SnapshotSelection { layers: Some(vec![2]), ..Default::default() };
        assert!(matches!(bad.series_count(2, 16), Err(Error::Config(_))));
    }

    #[test]
    fn long_stride_gives_initial_snapshot_only() {
        let mut cfg = ModelConfig::new(3, 2);
        cfg.d_model = 4;
        cfg.n_heads = 2;
        let model = Model::new(cfg).unwrap();
        let stream = vec![LabeledInput::demo(vec![1.0, 0.0, 0.5], 1); 3];
        let mut buf = Vec::new();
        let n = dump_weight_snapshots(&model, &stream, 10, &SnapshotSelection::first_head(), &mut buf).unwrap();
        assert_eq!(n, 1);
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with(SNAPSHOT_HEADER));
        let rows = text.lines().count() - 1;
        assert_eq!(rows, 2 * model.srwm_dims().rows() * 2);
    }
}
