#![allow(dead_code)]

use std::path::PathBuf;

use pcw_core::model::{Model, PositionalKind};
use pcw_core::tokenizer::{load_bpe, BpeVocab};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tokens(rng: &mut impl Rng, n: usize, vocab: usize) -> Vec<u32> {
    (0..n).map(|_| rng.gen_range(0..vocab as u32)).collect()
}

/// Largest absolute difference divided by the largest magnitude in `b`.
pub fn rel_diff(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len());
    let scale = b.iter().fold(0.0f32, |m, v| m.max(v.abs())).max(1e-12);
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max) / scale
}

pub fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

/// Straight-line causal transformer written from the weight tensors alone,
/// with no shared code paths. Positions are `0..n`. Returns `[n][vocab]`.
pub fn reference_causal_logits(model: &Model, tokens: &[u32]) -> Vec<Vec<f32>> {
    let cfg = model.config();
    let w = model.weights();
    let (d, nh) = (cfg.d_model, cfg.n_heads);
    let hd = d / nh;
    let n = tokens.len();

    let mut x: Vec<Vec<f32>> = tokens
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let mut e = w.token_embedding.row(t as usize).to_vec();
            if let Some(p) = &w.positional_table {
                for (a, b) in e.iter_mut().zip(p.row(i)) {
                    *a += b;
                }
            }
            e
        })
        .collect();

    let ln = |v: &[f32], g: &[f32], b: &[f32]| -> Vec<f32> {
        let mut mean = 0.0f32;
        for a in v {
            mean += a;
        }
        mean /= v.len() as f32;
        let mut var = 0.0f32;
        for a in v {
            var += (a - mean) * (a - mean);
        }
        var /= v.len() as f32;
        let inv = 1.0 / (var + cfg.ln_eps).sqrt();
        (0..v.len()).map(|i| (v[i] - mean) * inv * g[i] + b[i]).collect()
    };
    let linear = |v: &[f32], m: &pcw_core::Matrix, bias: &[f32]| -> Vec<f32> {
        let mut out = vec![0.0f32; m.cols()];
        for (p, &a) in v.iter().enumerate() {
            for (j, o) in out.iter_mut().enumerate() {
                *o += a * m.get(p, j);
            }
        }
        out.iter().zip(bias).map(|(o, b)| o + b).collect()
    };
    let rotate = |v: &mut [f32], pos: usize| {
        for k in 0..hd / 2 {
            let theta = pos as f64 * f64::from(cfg.rotary_base).powf(-2.0 * k as f64 / hd as f64);
            let (s, c) = (theta.sin() as f32, theta.cos() as f32);
            let (a, b) = (v[2 * k], v[2 * k + 1]);
            v[2 * k] = a * c - b * s;
            v[2 * k + 1] = a * s + b * c;
        }
    };

    for lw in &w.layers {
        let mut qs = Vec::new();
        let mut ks = Vec::new();
        let mut vs = Vec::new();
        for (i, row) in x.iter().enumerate() {
            let h = ln(row, &lw.ln_1_gamma, &lw.ln_1_beta);
            let qkv = linear(&h, &lw.attn_qkv, &lw.attn_qkv_bias);
            let (mut q, mut k, v) = (qkv[..d].to_vec(), qkv[d..2 * d].to_vec(), qkv[2 * d..].to_vec());
            if cfg.positional_kind == PositionalKind::Rotary {
                for head in 0..nh {
                    rotate(&mut q[head * hd..(head + 1) * hd], i);
                    rotate(&mut k[head * hd..(head + 1) * hd], i);
                }
            }
            qs.push(q);
            ks.push(k);
            vs.push(v);
        }
        for i in 0..n {
            let mut attn = vec![0.0f32; d];
            for head in 0..nh {
                let r = head * hd..(head + 1) * hd;
                let scores: Vec<f32> = (0..=i)
                    .map(|j| {
                        let mut s = 0.0f32;
                        for (a, b) in qs[i][r.clone()].iter().zip(&ks[j][r.clone()]) {
                            s += a * b;
                        }
                        s * (1.0 / (hd as f32).sqrt())
                    })
                    .collect();
                let max = scores.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                let exps: Vec<f32> = scores.iter().map(|s| (s - max).exp()).collect();
                let mut total = 0.0f32;
                for e in &exps {
                    total += e;
                }
                for (j, e) in exps.iter().enumerate() {
                    let p = e / total;
                    for (o, vv) in attn[r.clone()].iter_mut().zip(&vs[j][r.clone()]) {
                        *o += p * vv;
                    }
                }
            }
            let proj = linear(&attn, &lw.attn_out, &lw.attn_out_bias);
            for (a, b) in x[i].iter_mut().zip(&proj) {
                *a += b;
            }
            let h2 = ln(&x[i], &lw.ln_2_gamma, &lw.ln_2_beta);
            let f: Vec<f32> = linear(&h2, &lw.mlp_in, &lw.mlp_in_bias)
                .into_iter()
                .map(|z| match cfg.gelu {
                    pcw_core::tensor::GeluKind::Tanh => {
                        0.5 * z * (1.0 + (0.797_884_6f32 * (z + 0.044_715 * z * z * z)).tanh())
                    }
                    pcw_core::tensor::GeluKind::Erf => pcw_core::tensor::gelu_erf(z),
                })
                .collect();
            let out = linear(&f, &lw.mlp_out, &lw.mlp_out_bias);
            for (a, b) in x[i].iter_mut().zip(&out) {
                *a += b;
            }
        }
    }

    let head = w.lm_head.as_ref().unwrap_or(&w.token_embedding);
    x.iter()
        .map(|row| {
            let h = ln(row, &w.ln_f_gamma, &w.ln_f_beta);
            (0..head.rows())
                .map(|v| {
                    let mut s = 0.0f32;
                    for (a, b) in h.iter().zip(head.row(v)) {
                        s += a * b;
                    }
                    s
                })
                .collect()
        })
        .collect()
}

pub fn data(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(rel)
}

pub fn gpt2() -> BpeVocab {
    load_bpe(data("gpt2/vocab.json"), data("gpt2/merges.txt")).unwrap()
}

#[derive(Deserialize)]
struct Reference {
    text: String,
    ids: Vec<u32>,
}

pub fn references() -> Vec<(String, Vec<u32>)> {
    std::fs::read_to_string(data("oracles/gpt2_tokenization.jsonl"))
        .unwrap()
        .lines()
        .map(|l| {
            let r: Reference = serde_json::from_str(l).unwrap();
            (r.text, r.ids)
        })
        .collect()
}

/// ~`target` bytes of mixed-script text with ASCII words, whitespace runs,
/// digits, punctuation and random scalar values.
pub fn random_corpus(seed: u64, target: usize) -> String {
    let mut r = rng(seed);
    let words = [
        "the",
        "river",
        "don't",
        "I'll",
        "Sentiment:",
        "42",
        "3.14",
        "naïve",
        "日本語",
        "Ωμέγα",
        "😀",
        "\t",
        "\r\n",
    ];
    let mut s = String::with_capacity(target + 16);
    while s.len() < target {
        match r.gen_range(0..10) {
            0..=3 => s.push_str(words[r.gen_range(0..words.len())]),
            4 => s.push_str(&" ".repeat(r.gen_range(1..5))),
            5 => s.push('\n'),
            6 => s.push(char::from(r.gen_range(0x21u8..0x7f))),
            _ => {
                let c = loop {
                    if let Some(c) = char::from_u32(r.gen_range(0..0x11_0000)) {
                        break c;
                    }
                };
                s.push(c);
            }
        }
        if r.gen_bool(0.5) {
            s.push(' ');
        }
    }
    s
}

#[derive(Deserialize)]
pub struct WelchCase {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub t: f64,
    pub p: f64,
}

#[derive(Deserialize)]
pub struct WelchFixture {
    pub worked: WelchCase,
    pub random: Vec<WelchCase>,
}

pub fn welch_fixture() -> WelchFixture {
    serde_json::from_str(&std::fs::read_to_string(data("oracles/welch_reference.json")).unwrap()).unwrap()
}
