//! Attention-map dumps for inspecting a trained tracker.
//!
//! One forward pass over a (template, search) pair is traced, then a single
//! query row of every attention block is written as an 8-bit PGM. Template
//! branches use the template's center token as the query; search branches use
//! the token with the highest foreground score.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::imageio::write_pgm;
use crate::model::{CombineMode, Model};
use crate::tensor::param::ParamStore;
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

/// Head-averaged attention row `q_idx` of a multi-head weight set, as a
/// `kv_h x kv_w` map.
fn head_mean_row(tape: &Tape, heads: &[Var], q_idx: usize, kv: (usize, usize)) -> Tensor {
    let (kv_h, kv_w) = kv;
    let n_k = kv_h * kv_w;
    let mut row = vec![0.0 as Real; n_k];
    for &h in heads {
        let w = tape.value(h);
        let n_q = w.shape()[0];
        assert_eq!(w.shape()[1], n_k);
        assert!(q_idx < n_q);
        let data = &w.data()[q_idx * n_k..(q_idx + 1) * n_k];
        for (acc, &v) in row.iter_mut().zip(data) {
            *acc += v;
        }
    }
    let inv = 1.0 / heads.len() as Real;
    for v in &mut row {
        *v *= inv;
    }
    Tensor::new(&[kv_h, kv_w], row)
}

/// Min-max normalize to [0,1]. A constant map maps to zero.
fn normalize(map: &Tensor) -> Tensor {
    let lo = map.data().iter().cloned().fold(Real::INFINITY, Real::min);
    let hi = map.data().iter().cloned().fold(Real::NEG_INFINITY, Real::max);
    let span = hi - lo;
    let data = if span > 0.0 {
        map.data().iter().map(|&v| (v - lo) / span).collect()
    } else {
        vec![0.0; map.data().len()]
    };
    Tensor::new(map.shape(), data)
}

fn emit(dir: &Path, name: &str, map: &Tensor, files: &mut Vec<PathBuf>) -> Result<()> {
    let path = dir.join(name);
    write_pgm(&path, &normalize(map))?;
    files.push(path);
    Ok(())
}

/// Trace one (template, search) forward pass and write every attention map
/// family under `out_dir`: four per fusion layer plus the final decode
/// cross-attention. Returns the written paths in emission order.
pub fn dump_attention(
    model: &Model,
    store: &ParamStore,
    template: &Tensor,
    search: &Tensor,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let mut tape = Tape::new();
    let z = tape.input(template.clone());
    let x = tape.input(search.clone());
    let out = model.forward(&mut tape, store, &[z], x, CombineMode::Concat, true)?;
    let trace = out
        .trace
        .as_ref()
        .ok_or_else(|| Error::Config("the correlation variant has no attention maps".into()))?;

    let ts = model.profile().template_size / 8;
    let z_grid = (ts, ts);
    let x_grid = out.grid;
    let z_center = (ts / 2) * ts + ts / 2;
    let scores = tape.value(out.scores);
    let x_top = scores
        .data()
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap();

    std::fs::create_dir_all(out_dir)?;
    let mut files = Vec::new();
    for (i, layer) in trace.layers.iter().enumerate() {
        emit(out_dir, &format!("layer{i}_eca_z.pgm"), &head_mean_row(&tape, &layer.eca_z, z_center, z_grid), &mut files)?;
        emit(out_dir, &format!("layer{i}_eca_x.pgm"), &head_mean_row(&tape, &layer.eca_x, x_top, x_grid), &mut files)?;
        emit(out_dir, &format!("layer{i}_cfa_z.pgm"), &head_mean_row(&tape, &layer.cfa_z, z_center, x_grid), &mut files)?;
        emit(out_dir, &format!("layer{i}_cfa_x.pgm"), &head_mean_row(&tape, &layer.cfa_x, x_top, z_grid), &mut files)?;
    }
    emit(out_dir, "final_cfa.pgm", &head_mean_row(&tape, &trace.final_cfa, x_top, z_grid), &mut files)?;
    Ok(files)
}
