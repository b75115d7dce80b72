use rand::Rng as _;

use super::{HeadGrads, HeadIds, HeadOutputs, RewardNet, Token, TokenSequence};
use crate::error::{Error, Result};
use crate::nn::{
    attention_backward, attention_forward, axpy, gelu, gelu_grad, layernorm_backward, layernorm_forward, linear_backward,
    linear_forward, softmax,
};
use crate::rng::Rng;

type Stats = Vec<(f64, f64)>;

#[derive(Debug, Clone)]
struct BlockCache {
    x_in: Vec<f64>,
    ln1: Vec<f64>,
    ln1_stats: Stats,
    qkv: Vec<f64>,
    att: Vec<f64>,
    attn_out: Vec<f64>,
    x_mid: Vec<f64>,
    ln2: Vec<f64>,
    ln2_stats: Stats,
    fc_pre: Vec<f64>,
    fc_act: Vec<f64>,
}

#[derive(Debug, Clone)]
struct HeadCache {
    rows: usize,
    input: Vec<f64>,
    h1: Vec<f64>,
    ln: Vec<f64>,
    ln_stats: Stats,
    /// Dropout scale per hidden unit (1 when dropout is off).
    keep: Vec<f64>,
    act: Vec<f64>,
}

/// Activations saved by `forward` for `backward`.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    blocks: Vec<BlockCache>,
    x_final: Vec<f64>,
    lnf_stats: Stats,
    progress: HeadCache,
    success: HeadCache,
    pref: HeadCache,
}

fn run_head(
    net: &RewardNet,
    w: &[Vec<f64>],
    ids: &HeadIds,
    input: Vec<f64>,
    rows: usize,
    dropout: Option<&mut Rng>,
) -> (Vec<f64>, HeadCache) {
    let d = net.cfg.d_model;
    let hh = net.cfg.head_hidden;
    let mut h1 = vec![0.0; rows * hh];
    linear_forward(&mut h1, &input, &w[ids.fc1_w], Some(&w[ids.fc1_b]), rows, d, hh);
    let mut ln = vec![0.0; rows * hh];
    let ln_stats = layernorm_forward(&mut ln, &h1, &w[ids.ln_g], &w[ids.ln_b], rows, hh);
    let p = net.cfg.head_dropout;
    let keep: Vec<f64> = match dropout {
        Some(rng) if p > 0.0 => (0..rows * hh)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { 1.0 / (1.0 - p) })
            .collect(),
        _ => vec![1.0; rows * hh],
    };
    let act: Vec<f64> = ln.iter().zip(&keep).map(|(&x, &k)| gelu(x) * k).collect();
    let mut out = vec![0.0; rows * ids.out];
    linear_forward(&mut out, &act, &w[ids.fc2_w], Some(&w[ids.fc2_b]), rows, hh, ids.out);
    (
        out,
        HeadCache {
            rows,
            input,
            h1,
            ln,
            ln_stats,
            keep,
            act,
        },
    )
}

/// Returns the gradient with respect to the head input rows.
fn head_backward(net: &RewardNet, w: &[Vec<f64>], ids: &HeadIds, c: &HeadCache, dout: &[f64], grads: &mut [Vec<f64>]) -> Vec<f64> {
    let d = net.cfg.d_model;
    let hh = net.cfg.head_hidden;
    let rows = c.rows;
    let mut dact = vec![0.0; rows * hh];
    linear_backward(Some(&mut dact), &mut grads[ids.fc2_w], None, dout, &c.act, &w[ids.fc2_w], rows, hh, ids.out);
    {
        let db = &mut grads[ids.fc2_b];
        for r in 0..rows {
            axpy(db, &dout[r * ids.out..(r + 1) * ids.out], 1.0);
        }
    }
    let dln: Vec<f64> = (0..rows * hh).map(|i| dact[i] * c.keep[i] * gelu_grad(c.ln[i])).collect();
    let mut dh1 = vec![0.0; rows * hh];
    let (mut dg, mut db) = (vec![0.0; hh], vec![0.0; hh]);
    layernorm_backward(&mut dh1, &mut dg, &mut db, &dln, &c.h1, &w[ids.ln_g], &c.ln_stats, hh);
    axpy(&mut grads[ids.ln_g], &dg, 1.0);
    axpy(&mut grads[ids.ln_b], &db, 1.0);
    let mut dinput = vec![0.0; rows * d];
    let mut dfc1_b = vec![0.0; hh];
    linear_backward(
        Some(&mut dinput),
        &mut grads[ids.fc1_w],
        Some(&mut dfc1_b),
        &dh1,
        &c.input,
        &w[ids.fc1_w],
        rows,
        d,
        hh,
    );
    axpy(&mut grads[ids.fc1_b], &dfc1_b, 1.0);
    dinput
}

fn gather(x: &[f64], rows: &[usize], d: usize) -> Vec<f64> {
    rows.iter().flat_map(|&r| x[r * d..(r + 1) * d].iter().copied()).collect()
}

pub(super) fn forward(
    net: &RewardNet,
    w: &[Vec<f64>],
    seq: &TokenSequence,
    mut dropout: Option<&mut Rng>,
) -> Result<(HeadOutputs, ForwardCache)> {
    let cfg = &net.cfg;
    let lay = &net.layout;
    let d = cfg.d_model;
    let n = seq.len();
    if n > cfg.max_seq || seq.patch_dim != cfg.patch_dim() {
        return Err(Error::ShapeMismatch {
            path: "<sequence>".into(),
            detail: format!("{n} tokens of patch width {} vs model {}/{}", seq.patch_dim, cfg.max_seq, cfg.patch_dim()),
        });
    }
    let mut x = vec![0.0; n * d];
    for (i, tok) in seq.tokens.iter().enumerate() {
        let row = &mut x[i * d..(i + 1) * d];
        row.copy_from_slice(&w[lay.pos][i * d..(i + 1) * d]);
        match *tok {
            Token::Word(id) => axpy(row, &w[lay.word][id * d..(id + 1) * d], 1.0),
            Token::Special(s) => {
                let s = s as usize;
                axpy(row, &w[lay.special][s * d..(s + 1) * d], 1.0)
            }
            Token::Patch { row: r, slot } => {
                let pd = seq.patch_dim;
                let mut e = vec![0.0; d];
                linear_forward(&mut e, &seq.patches[r * pd..(r + 1) * pd], &w[lay.patch_w], Some(&w[lay.patch_b]), 1, pd, d);
                axpy(row, &e, 1.0);
                axpy(row, &w[lay.patch_pos][slot * d..(slot + 1) * d], 1.0);
            }
        }
    }

    let h = cfg.n_heads;
    let mut blocks = Vec::with_capacity(cfg.n_layers);
    for b in &lay.blocks {
        let x_in = x;
        let mut ln1 = vec![0.0; n * d];
        let ln1_stats = layernorm_forward(&mut ln1, &x_in, &w[b.ln1_g], &w[b.ln1_b], n, d);
        let mut qkv = vec![0.0; n * 3 * d];
        linear_forward(&mut qkv, &ln1, &w[b.qkv_w], Some(&w[b.qkv_b]), n, d, 3 * d);
        let mut att = vec![0.0; h * n * n];
        let mut attn_out = vec![0.0; n * d];
        attention_forward(&mut attn_out, &mut att, &qkv, n, d, h);
        let mut x_mid = vec![0.0; n * d];
        linear_forward(&mut x_mid, &attn_out, &w[b.proj_w], Some(&w[b.proj_b]), n, d, d);
        axpy(&mut x_mid, &x_in, 1.0);
        let mut ln2 = vec![0.0; n * d];
        let ln2_stats = layernorm_forward(&mut ln2, &x_mid, &w[b.ln2_g], &w[b.ln2_b], n, d);
        let mut fc_pre = vec![0.0; n * 4 * d];
        linear_forward(&mut fc_pre, &ln2, &w[b.fc_w], Some(&w[b.fc_b]), n, d, 4 * d);
        let fc_act: Vec<f64> = fc_pre.iter().map(|&v| gelu(v)).collect();
        let mut x_out = vec![0.0; n * d];
        linear_forward(&mut x_out, &fc_act, &w[b.mlp_proj_w], Some(&w[b.mlp_proj_b]), n, 4 * d, d);
        axpy(&mut x_out, &x_mid, 1.0);
        blocks.push(BlockCache {
            x_in,
            ln1,
            ln1_stats,
            qkv,
            att,
            attn_out,
            x_mid,
            ln2,
            ln2_stats,
            fc_pre,
            fc_act,
        });
        x = x_out;
    }
    let mut lnf = vec![0.0; n * d];
    let lnf_stats = layernorm_forward(&mut lnf, &x, &w[lay.lnf_g], &w[lay.lnf_b], n, d);

    let t = seq.prog_positions.len();
    let prog_rows = gather(&lnf, &seq.prog_positions, d);
    let (plog, progress) = run_head(net, w, &lay.progress, prog_rows.clone(), t, dropout.as_deref_mut());
    let (slog, success) = run_head(net, w, &lay.success, prog_rows, t, dropout.as_deref_mut());
    let (rlog, pref) = run_head(net, w, &lay.pref, gather(&lnf, &[seq.pref_position], d), 1, dropout);

    let nb = cfg.n_bins;
    let progress_logits: Vec<Vec<f64>> = plog.chunks(nb).map(|c| c.to_vec()).collect();
    let progress_dists = progress_logits
        .iter()
        .map(|l| {
            let mut p = l.clone();
            softmax(&mut p);
            p
        })
        .collect();
    Ok((
        HeadOutputs {
            progress_logits,
            progress_dists,
            success_logits: slog,
            pref_logit: rlog[0],
        },
        ForwardCache {
            blocks,
            x_final: x,
            lnf_stats,
            progress,
            success,
            pref,
        },
    ))
}

pub(super) fn backward(net: &RewardNet, w: &[Vec<f64>], seq: &TokenSequence, c: &ForwardCache, dh: &HeadGrads, grads: &mut [Vec<f64>]) {
    let cfg = &net.cfg;
    let lay = &net.layout;
    let d = cfg.d_model;
    let n = seq.len();
    let h = cfg.n_heads;

    let mut dlnf = vec![0.0; n * d];
    let scatter = |dlnf: &mut [f64], rows: &[usize], g: &[f64]| {
        for (k, &r) in rows.iter().enumerate() {
            axpy(&mut dlnf[r * d..(r + 1) * d], &g[k * d..(k + 1) * d], 1.0);
        }
    };
    if dh.progress.iter().any(|&v| v != 0.0) {
        let g = head_backward(net, w, &lay.progress, &c.progress, &dh.progress, grads);
        scatter(&mut dlnf, &seq.prog_positions, &g);
    }
    if dh.success.iter().any(|&v| v != 0.0) {
        let g = head_backward(net, w, &lay.success, &c.success, &dh.success, grads);
        scatter(&mut dlnf, &seq.prog_positions, &g);
    }
    if dh.pref != 0.0 {
        let g = head_backward(net, w, &lay.pref, &c.pref, &[dh.pref], grads);
        scatter(&mut dlnf, &[seq.pref_position], &g);
    }

    let mut dx = vec![0.0; n * d];
    {
        let (mut dg, mut db) = (vec![0.0; d], vec![0.0; d]);
        layernorm_backward(&mut dx, &mut dg, &mut db, &dlnf, &c.x_final, &w[lay.lnf_g], &c.lnf_stats, d);
        axpy(&mut grads[lay.lnf_g], &dg, 1.0);
        axpy(&mut grads[lay.lnf_b], &db, 1.0);
    }

    for (b, bc) in lay.blocks.iter().zip(&c.blocks).rev() {
        // MLP branch; dx is the gradient at the block output.
        let mut dfc_act = vec![0.0; n * 4 * d];
        let mut db_tmp = vec![0.0; d];
        linear_backward(Some(&mut dfc_act), &mut grads[b.mlp_proj_w], Some(&mut db_tmp), &dx, &bc.fc_act, &w[b.mlp_proj_w], n, 4 * d, d);
        axpy(&mut grads[b.mlp_proj_b], &db_tmp, 1.0);
        let dfc_pre: Vec<f64> = dfc_act.iter().zip(&bc.fc_pre).map(|(&g, &v)| g * gelu_grad(v)).collect();
        let mut dln2 = vec![0.0; n * d];
        let mut dfc_b = vec![0.0; 4 * d];
        linear_backward(Some(&mut dln2), &mut grads[b.fc_w], Some(&mut dfc_b), &dfc_pre, &bc.ln2, &w[b.fc_w], n, d, 4 * d);
        axpy(&mut grads[b.fc_b], &dfc_b, 1.0);
        let mut dx_mid = dx;
        let (mut dg, mut dbb) = (vec![0.0; d], vec![0.0; d]);
        layernorm_backward(&mut dx_mid, &mut dg, &mut dbb, &dln2, &bc.x_mid, &w[b.ln2_g], &bc.ln2_stats, d);
        axpy(&mut grads[b.ln2_g], &dg, 1.0);
        axpy(&mut grads[b.ln2_b], &dbb, 1.0);

        // Attention branch.
        let mut dattn = vec![0.0; n * d];
        let mut dproj_b = vec![0.0; d];
        linear_backward(Some(&mut dattn), &mut grads[b.proj_w], Some(&mut dproj_b), &dx_mid, &bc.attn_out, &w[b.proj_w], n, d, d);
        axpy(&mut grads[b.proj_b], &dproj_b, 1.0);
        let mut dqkv = vec![0.0; n * 3 * d];
        attention_backward(&mut dqkv, &dattn, &bc.qkv, &bc.att, n, d, h);
        let mut dln1 = vec![0.0; n * d];
        let mut dqkv_b = vec![0.0; 3 * d];
        linear_backward(Some(&mut dln1), &mut grads[b.qkv_w], Some(&mut dqkv_b), &dqkv, &bc.ln1, &w[b.qkv_w], n, d, 3 * d);
        axpy(&mut grads[b.qkv_b], &dqkv_b, 1.0);
        let mut dx_in = dx_mid;
        let (mut dg, mut dbb) = (vec![0.0; d], vec![0.0; d]);
        layernorm_backward(&mut dx_in, &mut dg, &mut dbb, &dln1, &bc.x_in, &w[b.ln1_g], &bc.ln1_stats, d);
        axpy(&mut grads[b.ln1_g], &dg, 1.0);
        axpy(&mut grads[b.ln1_b], &dbb, 1.0);
        dx = dx_in;
    }

    let pd = seq.patch_dim;
    for (i, tok) in seq.tokens.iter().enumerate() {
        let g = &dx[i * d..(i + 1) * d];
        axpy(&mut grads[lay.pos][i * d..(i + 1) * d], g, 1.0);
        match *tok {
            Token::Word(id) => axpy(&mut grads[lay.word][id * d..(id + 1) * d], g, 1.0),
            Token::Special(s) => {
                let s = s as usize;
                axpy(&mut grads[lay.special][s * d..(s + 1) * d], g, 1.0)
            }
            Token::Patch { row, slot } => {
                let patch = &seq.patches[row * pd..(row + 1) * pd];
                for (o, &go) in g.iter().enumerate() {
                    if go != 0.0 {
                        axpy(&mut grads[lay.patch_w][o * pd..(o + 1) * pd], patch, go);
                    }
                }
                axpy(&mut grads[lay.patch_b], g, 1.0);
                axpy(&mut grads[lay.patch_pos][slot * d..(slot + 1) * d], g, 1.0);
            }
        }
    }
}
