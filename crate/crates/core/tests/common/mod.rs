//! Naive reference implementations shared by the oracle tests.
#![allow(dead_code)]

use cpa_enhancer::tensor::Tensor;

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Zero-padded cross-correlation written straight from the definition.
pub fn naive_conv(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize, groups: usize) -> Tensor {
    let [n, cin, h, wd] = x.shape().dims();
    let [cout, cin_g, k, _] = w.shape().dims();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let cout_g = cout / groups;
    assert_eq!(cin_g * groups, cin);
    Tensor::from_fn([n, cout, oh, ow], |ni, o, oy, ox| {
        let g = o / cout_g;
        let mut acc = b.map_or(0.0, |b| b.data()[o]);
        for ci in 0..cin_g {
            for ky in 0..k {
                for kx in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                        acc += x.at(ni, g * cin_g + ci, iy as usize, ix as usize) * w.at(o, ci, ky, kx);
                    }
                }
            }
        }
        acc
    })
}

/// Half-pixel bilinear sampling with edge clamping.
pub fn naive_bilinear(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let [n, c, h, w] = x.shape().dims();
    let taps = |d: usize, out: usize, inp: usize| {
        let src = ((d as f64 + 0.5) * inp as f64 / out as f64 - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(inp - 1);
        let i1 = (i0 + 1).min(inp - 1);
        (i0, i1, src - i0 as f64)
    };
    Tensor::from_fn([n, c, oh, ow], |ni, ci, y, xx| {
        let (y0, y1, fy) = taps(y, oh, h);
        let (x0, x1, fx) = taps(xx, ow, w);
        let top = x.at(ni, ci, y0, x0) * (1.0 - fx) + x.at(ni, ci, y0, x1) * fx;
        let bot = x.at(ni, ci, y1, x0) * (1.0 - fx) + x.at(ni, ci, y1, x1) * fx;
        top * (1.0 - fy) + bot * fy
    })
}

/// Elementwise combination of two same-shape tensors.
pub fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    assert_eq!(a.shape(), b.shape());
    Tensor::from_fn(a.shape(), |n, c, h, w| f(a.at(n, c, h, w), b.at(n, c, h, w)))
}

/// Channel concatenation.
pub fn cat(a: &Tensor, b: &Tensor) -> Tensor {
    let [n, ca, h, w] = a.shape().dims();
    let cb = b.shape().c();
    Tensor::from_fn([n, ca + cb, h, w], |ni, c, y, x| if c < ca { a.at(ni, c, y, x) } else { b.at(ni, c - ca, y, x) })
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

pub const TINY_CONFIG: &str = r#"
[enhancer]
base_channels = 4
prompt_height = 2
prompt_width = 2
prompt_channels = 32
splits = 2
reduction = 4

[train]
images = 4
size = 16
batch = 2
kinds = ["fog", "dark"]
"#;

/// Runs every `cpa` subcommand on a tiny configuration inside `dir`.
pub fn run_all_subcommands(dir: &std::path::Path, threads: usize) -> Result<(), String> {
    let d = |p: &str| dir.join(p).to_string_lossy().into_owned();
    std::fs::write(dir.join("config.toml"), TINY_CONFIG).map_err(|e| e.to_string())?;
    let common = ["--seed", "5", "--threads", &threads.to_string(), "--config", &d("config.toml")].map(String::from);
    let runs: Vec<(&str, Vec<String>)> = vec![
        ("scenes", vec![d("scenes"), "--count".into(), "3".into(), "--size".into(), "16".into()]),
        ("degrade", vec![d("scenes"), d("degraded")]),
        ("degrade", vec![d("scenes/scene_000.png"), d("single.png"), "--kind".into(), "rain".into()]),
        ("init", vec![d("init.ckpt")]),
        (
            "train",
            vec![
                "--out".into(),
                d("trained.ckpt"),
                "--curve".into(),
                d("curve.csv"),
                "--manifest".into(),
                d("degraded/manifest.jsonl"),
                "--iters".into(),
                "2".into(),
            ],
        ),
        (
            "enhance",
            vec![
                d("degraded/scene_001_dark.png"),
                d("enhanced.png"),
                "--checkpoint".into(),
                d("trained.ckpt"),
                "--dump-features".into(),
                d("features"),
            ],
        ),
        (
            "gradcheck",
            vec!["--only".into(), "conv".into(), "--no-enhancer".into(), "--json".into(), d("gradcheck.json")],
        ),
        (
            "report",
            vec![
                "--checkpoint".into(),
                d("trained.ckpt"),
                "--out".into(),
                d("report.json"),
                "--kinds".into(),
                "fog,dark".into(),
                "--size".into(),
                "16".into(),
            ],
        ),
    ];
    for (cmd, args) in runs {
        let argv: Vec<String> = ["cpa".to_string(), cmd.to_string()]
            .into_iter()
            .chain(common.iter().cloned())
            .chain(args)
            .collect();
        let rc = cpa_enhancer::cli::run(argv.clone());
        if rc != 0 {
            return Err(format!("`{}` exited with {rc}", argv.join(" ")));
        }
    }
    Ok(())
}

fn files_under(root: &std::path::Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

/// Runs the full CLI twice in fresh directories and compares every artifact
/// byte for byte (paths embedded in manifests are normalized). Returns the
/// number of artifacts compared.
pub fn cli_is_deterministic(threads: [usize; 2]) -> Result<usize, String> {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    run_all_subcommands(a.path(), threads[0])?;
    run_all_subcommands(b.path(), threads[1])?;
    let (fa, fb) = (files_under(a.path()), files_under(b.path()));
    if fa != fb {
        return Err(format!("artifact sets differ: {fa:?} vs {fb:?}"));
    }
    let (pa, pb) = (a.path().to_string_lossy().into_owned(), b.path().to_string_lossy().into_owned());
    for rel in &fa {
        let ba = std::fs::read(a.path().join(rel)).unwrap();
        let bb = std::fs::read(b.path().join(rel)).unwrap();
        let same = ba == bb
            || match (String::from_utf8(ba), String::from_utf8(bb)) {
                (Ok(sa), Ok(sb)) => sa.replace(&pa, "<dir>") == sb.replace(&pb, "<dir>"),
                _ => false,
            };
        if !same {
            return Err(format!("{} differs between runs", rel.display()));
        }
    }
    Ok(fa.len())
}
