//! Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any
//! criterion fails. Trains every variant on the default benchmark, so it
//! takes several minutes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use adtr::checkpoint;
use adtr::eval::{auroc, RunReport};
use adtr::feature_io::{decode_sample, write_sample, DatasetManifest, FeatureMap, Split, FIXED_HEADER_LEN};
use adtr::losses::{diff_map, image_score, loss_img, loss_norm, loss_px, pseudo_huber, topk_score, LossConfig, SpatialMap};
use adtr::model::forward;
use adtr::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

const VARIANTS: [&str; 4] = ["attn_query", "no_attn", "no_query", "cnn_baseline"];

struct Verdict {
    name: &'static str,
    passed: bool,
    detail: String,
}

struct Session {
    root: PathBuf,
    verdicts: Vec<Verdict>,
}

impl Session {
    fn run(&self, args: &[&str]) -> Result<Output, String> {
        let out = Command::new(env!("CARGO_BIN_EXE_adtr"))
            .args(args)
            .current_dir(&self.root)
            .output()
            .map_err(|e| format!("spawn: {e}"))?;
        Ok(out)
    }

    fn ok(&self, args: &[&str]) -> Result<Duration, String> {
        let start = Instant::now();
        let out = self.run(args)?;
        if !out.status.success() {
            return Err(format!("{args:?} failed: {}", String::from_utf8_lossy(&out.stderr).trim()));
        }
        Ok(start.elapsed())
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn report(&self, rel: &str) -> Result<RunReport, String> {
        let text = std::fs::read_to_string(self.path(rel)).map_err(|e| format!("{rel}: {e}"))?;
        RunReport::from_json(&text).map_err(|e| format!("{rel}: {e}"))
    }

    fn record(&mut self, name: &'static str, outcome: Result<(bool, String), String>) {
        let (passed, detail) = outcome.unwrap_or_else(|e| (false, e));
        println!("{} {name}: {detail}", if passed { "PASS" } else { "FAIL" });
        self.verdicts.push(Verdict { name, passed, detail });
    }
}

fn golden_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/golden.adtrft")
}

fn gradient_integrity(s: &Session) -> Result<(bool, String), String> {
    let elapsed = s.ok(&["grad-check", "--out", "gradcheck"])?;
    let text = std::fs::read_to_string(s.path("gradcheck/gradcheck.json")).map_err(|e| e.to_string())?;
    let reports: Vec<serde_json::Value> = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    let (mut ops, mut models, mut worst_op, mut worst_model, mut good) = (0, 0, 0.0f64, 0.0f64, true);
    for r in &reports {
        let err = r["max_rel_error"].as_f64().unwrap_or(f64::INFINITY);
        let name = r["name"].as_str().unwrap_or_default();
        good &= r["probes"].as_u64() == Some(100);
        if name.starts_with("model") {
            models += 1;
            worst_model = worst_model.max(err);
        } else {
            ops += 1;
            worst_op = worst_op.max(err);
        }
    }
    let passed = good && ops > 0 && models > 0 && worst_op <= 1e-4 && worst_model <= 1e-3 && elapsed < Duration::from_secs(60);
    Ok((
        passed,
        format!(
            "{ops} ops max rel {worst_op:.2e} (<=1e-4), {models} model cases max rel {worst_model:.2e} (<=1e-3), 100 probes each, {:.1}s",
            elapsed.as_secs_f64()
        ),
    ))
}

fn loss_oracles() -> Result<(bool, String), String> {
    let e = |x: adtr::losses::LossError| x.to_string();
    let cfg = LossConfig::default();
    let ln2 = std::f64::consts::LN_2;
    let map = |c, h, w, v: Vec<f32>| FeatureMap::new(c, h, w, v).map_err(|x| x.to_string());
    let phi_map = |h, w, v: Vec<f32>| SpatialMap::new(h, w, v).map_err(|x| x.to_string());
    let mut cases: Vec<(&str, f64, f64)> = Vec::new();
    cases.push(("loss_norm C2", loss_norm(&map(2, 1, 1, vec![1.0, 1.0])?, &map(2, 1, 1, vec![0.0, 0.0])?).map_err(e)?, 2.0));
    cases.push(("loss_norm HW4", loss_norm(&map(1, 2, 2, vec![1.0; 4])?, &map(1, 2, 2, vec![0.0; 4])?).map_err(e)?, 1.0));
    let d = Tensor::new(&[2, 1, 2], vec![1.0f32, -3.0, -1.0, 1.0]).map_err(|x| x.to_string())?;
    let phi = pseudo_huber(&d).map_err(e)?;
    cases.push(("pseudo_huber m=1", f64::from(phi.get(0, 0)), 2f64.sqrt() - 1.0));
    cases.push(("pseudo_huber m=2", f64::from(phi.get(0, 1)), 5f64.sqrt() - 1.0));
    let half = phi_map(2, 2, vec![ln2 as f32; 4])?;
    cases.push(("loss_px y=1", loss_px(&half, &[1; 4], &cfg).map_err(e)?, 0.003 * ln2));
    let normal = phi_map(2, 2, vec![0.2, 0.5, 0.1, 0.9])?;
    cases.push(("loss_px y=0", loss_px(&normal, &[0; 4], &cfg).map_err(e)?, 0.425 - 0.003 * 1e-6f64.ln()));
    cases.push(("topk", topk_score(&phi_map(2, 2, vec![5.0, 1.0, 3.0, 2.0])?, 2).map_err(e)?, 4.0));
    cases.push(("loss_img y=1", loss_img(ln2, 1, &cfg).map_err(e)?, 0.00207944));
    cases.push(("loss_img y=0", loss_img(0.37, 0, &cfg).map_err(e)?, 0.37));
    let mut spike = vec![0.0; 9];
    spike[4] = 9.0;
    cases.push(("image_score", f64::from(image_score(&phi_map(3, 3, spike)?, 3).map_err(e)?), 1.0));
    let worst = cases.iter().map(|(_, got, want)| (got - want).abs()).fold(0.0, f64::max);
    let failing: Vec<&str> = cases.iter().filter(|(_, g, w)| (g - w).abs() > 1e-6).map(|c| c.0).collect();
    Ok((
        failing.is_empty(),
        format!("{} worked examples, max abs error {worst:.1e} (<=1e-6){}", cases.len(), if failing.is_empty() { String::new() } else { format!(", failing {failing:?}") }),
    ))
}

fn pairwise(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &a) in scores.iter().enumerate() {
        for (j, &b) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                wins += if a > b { 1.0 } else if a == b { 0.5 } else { 0.0 };
            }
        }
    }
    wins / pairs
}

fn auroc_correctness() -> Result<(bool, String), String> {
    let (mut worst, mut invariant, mut ties) = (0.0f64, true, 0);
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(4..150);
        let mut labels: Vec<u8> = (0..n).map(|_| u8::from(rng.gen_bool(0.45))).collect();
        labels[0] = 0;
        labels[1] = 1;
        let scores: Vec<f64> = labels.iter().map(|&l| f64::from(rng.gen_range(0..8) + l) * 0.125).collect();
        let mut sorted = scores.clone();
        sorted.sort_by(f64::total_cmp);
        ties += usize::from(sorted.windows(2).any(|w| w[0] == w[1]));
        let got = auroc(&scores, &labels).map_err(|e| e.to_string())?;
        worst = worst.max((got - pairwise(&scores, &labels)).abs());
        let transforms: [fn(f64) -> f64; 2] = [f64::exp, |x| 10.0 * x + 1.0];
        for t in transforms {
            let mapped: Vec<f64> = scores.iter().map(|&x| t(x)).collect();
            invariant &= auroc(&mapped, &labels).map_err(|e| e.to_string())? == got;
        }
    }
    Ok((
        worst <= 1e-12 && invariant,
        format!("50 seeded sets ({ties} with ties), max deviation from pairwise oracle {worst:.1e}, monotone invariance exact: {invariant}"),
    ))
}

fn end_to_end(s: &Session) -> Result<(bool, String), String> {
    let mut elapsed = s.ok(&["gen-data", "--out", "data"])?;
    elapsed += s.ok(&["train", "--manifest", "data/manifest.tsv", "--out", "train_attn_query"])?;
    elapsed += s.ok(&["eval", "--manifest", "data/manifest.tsv", "--checkpoint", "train_attn_query/model.adtrck", "--out", "eval_attn_query"])?;
    let r = s.report("eval_attn_query/report.json")?;
    let px = r.pixel_auroc.ok_or("report has no pixel AUROC")?;
    let passed = px >= 0.90 && r.image_auroc >= 0.90 && elapsed < Duration::from_secs(600);
    Ok((
        passed,
        format!("pixel AUROC {px:.4}, image AUROC {:.4} (both >=0.90), gen-data+train+eval {:.0}s (<600s)", r.image_auroc, elapsed.as_secs_f64()),
    ))
}

fn trace(path: &Path) -> Result<Vec<f64>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| e.to_string())?;
    text.lines()
        .filter(|l| !l.starts_with('#') && !l.is_empty())
        .map(|l| l.split('\t').nth(2).and_then(|v| v.parse().ok()).ok_or_else(|| format!("bad log line {l:?}")))
        .collect()
}

fn trainer_regression(s: &Session) -> Result<(bool, String), String> {
    let losses = trace(&s.path("train_attn_query/train_log.tsv"))?;
    let (first, last) = (losses[0], *losses.last().ok_or("empty trace")?);
    let averages: Vec<f64> = losses.windows(20).map(|w| w.iter().sum::<f64>() / 20.0).collect();
    let rises = averages.windows(2).filter(|w| w[1] > w[0]).count();
    let finite = losses.iter().all(|v| v.is_finite());

    let manifest = DatasetManifest::load(&s.path("data/manifest.tsv")).map_err(|e| e.to_string())?;
    let samples = manifest.load_split(&s.path("data"), Split::Train).map_err(|e| e.to_string())?;
    let (model, trained) = checkpoint::load(&s.path("train_attn_query/model.adtrck")).map_err(|e| e.to_string())?;
    let init = adtr::model::init_params(&model, 0).map_err(|e| e.to_string())?;
    let mut closer = 0;
    for r in &samples {
        let before = loss_norm(&r.features, &forward(&r.features, &init, &model).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        let after = loss_norm(&r.features, &forward(&r.features, &trained, &model).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        closer += usize::from(after < before);
    }
    Ok((
        finite && last < 0.1 * first && rises == 0 && closer == samples.len(),
        format!(
            "final/first epoch loss {:.4} (<0.1), 20-epoch moving average rises {rises} times, {closer}/{} train samples reconstructed closer than at init",
            last / first,
            samples.len()
        ),
    ))
}

fn ablation(s: &Session) -> Result<(bool, String), String> {
    let mut px = BTreeMap::new();
    px.insert("attn_query", s.report("eval_attn_query/report.json")?.pixel_auroc.ok_or("no pixel AUROC")?);
    for v in &VARIANTS[1..] {
        let (train, eval) = (format!("train_{v}"), format!("eval_{v}"));
        s.ok(&["train", "--manifest", "data/manifest.tsv", "--variant", v, "--out", &train])?;
        s.ok(&["eval", "--manifest", "data/manifest.tsv", "--checkpoint", &format!("{train}/model.adtrck"), "--out", &eval])?;
        px.insert(v, s.report(&format!("{eval}/report.json"))?.pixel_auroc.ok_or("no pixel AUROC")?);
    }
    let best = px["attn_query"];
    let passed = VARIANTS[1..].iter().all(|v| best > px[v]);
    let mut detail = String::from("pixel AUROC");
    for v in VARIANTS {
        let _ = write!(detail, " {v} {:.4}", px[v]);
    }
    detail.push_str(", strict attn_query > others required");
    Ok((passed, detail))
}

fn shortcut_mechanism(s: &Session) -> Result<(bool, String), String> {
    s.ok(&["shortcut-exp", "--out", "shortcut"])?;
    let text = std::fs::read_to_string(s.path("shortcut/shortcut.json")).map_err(|e| e.to_string())?;
    let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    let num = |k: &str| v[k].as_f64().ok_or_else(|| format!("missing {k}"));
    let ratio = num("ratio_of_ratios")?;
    let identity = num("full_rank_identity_distance")?;
    let (entropy, bound) = (num("attention_row_entropy")?, num("entropy_bound")?);
    let (ra, rq) = (num("affine_mse_reduction")?, num("attention_mse_reduction")?);
    Ok((
        ratio >= 2.0 && identity < 0.05,
        format!(
            "gap ratio attention/affine {ratio:.2} (>=2), full-rank affine |w-I|_F {identity:.4} (<0.05), row entropy {entropy:.3} vs bound {bound:.3}, train MSE reduction affine {:.1}% attention {:.1}%",
            100.0 * ra,
            100.0 * rq
        ),
    ))
}

fn mean_anomalous_phi(s: &Session, checkpoint_rel: &str) -> Result<f64, String> {
    let manifest = DatasetManifest::load(&s.path("data/manifest_aux.tsv")).map_err(|e| e.to_string())?;
    let samples = manifest.load_split(&s.path("data"), Split::Train).map_err(|e| e.to_string())?;
    let (model, params) = checkpoint::load(&s.path(checkpoint_rel)).map_err(|e| e.to_string())?;
    let (mut total, mut count) = (0.0, 0usize);
    for r in samples {
        let Some(mask) = r.pixel_mask.as_ref().filter(|m| m.contains(&1)) else { continue };
        let recon = forward(&r.features, &params, &model).map_err(|e| e.to_string())?;
        let phi = pseudo_huber(&diff_map(&r.features, &recon).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        for (u, &m) in mask.iter().enumerate() {
            if m == 1 {
                total += f64::from(phi.values[u]);
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err("no anomalous train positions in the auxiliary manifest".into());
    }
    Ok(total / count as f64)
}

fn anomaly_available(s: &Session) -> Result<(bool, String), String> {
    s.ok(&["finetune", "--manifest", "data/manifest_aux.tsv", "--checkpoint", "train_attn_query/model.adtrck", "--loss", "px", "--out", "finetune_px"])?;
    s.ok(&["eval", "--manifest", "data/manifest.tsv", "--checkpoint", "finetune_px/model.adtrck", "--out", "eval_finetune_px"])?;
    let base = s.report("eval_attn_query/report.json")?.pixel_auroc.ok_or("no pixel AUROC")?;
    let tuned = s.report("eval_finetune_px/report.json")?.pixel_auroc.ok_or("no pixel AUROC")?;
    let phi_before = mean_anomalous_phi(s, "train_attn_query/model.adtrck")?;
    let phi_after = mean_anomalous_phi(s, "finetune_px/model.adtrck")?;
    Ok((
        tuned >= base - 0.01 && phi_after > phi_before,
        format!("pixel AUROC {base:.4} -> {tuned:.4} (>= normal-only - 0.01), mean phi on anomalous train positions {phi_before:.4} -> {phi_after:.4} (must rise)"),
    ))
}

fn format_robustness(s: &Session) -> Result<(bool, String), String> {
    let bytes = std::fs::read(golden_path()).map_err(|e| e.to_string())?;
    let record = decode_sample(&bytes).map_err(|e| e.to_string())?;
    let mut again = Vec::new();
    write_sample(&record, &mut again).map_err(|e| e.to_string())?;
    let round_trip = again == bytes;
    std::fs::create_dir_all(s.path("corrupt")).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0_22);
    let mut rejected = 0;
    for i in 0..100 {
        let mut corrupt = bytes.clone();
        let at = rng.gen_range(0..FIXED_HEADER_LEN + 1);
        corrupt[at] = corrupt[at].wrapping_add(rng.gen_range(1..=255));
        let rel = format!("corrupt/{i:03}.adtrft");
        std::fs::write(s.path(&rel), &corrupt).map_err(|e| e.to_string())?;
        let out = s.run(&["validate", &rel])?;
        let named = String::from_utf8_lossy(&out.stderr).contains("error[");
        rejected += usize::from(out.status.code() == Some(1) && named);
    }
    let golden_ok = s.run(&["validate", golden_path().to_str().ok_or("path")?])?.status.success();
    Ok((
        rejected == 100 && round_trip && golden_ok,
        format!("{rejected}/100 seeded header corruptions rejected by validate with a named error, golden fixture accepted: {golden_ok}, write(read(golden)) bit-exact: {round_trip}"),
    ))
}

fn digest_dir(dir: &Path) -> Result<BTreeMap<String, String>, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).map_err(|e| e.to_string())? {
            let p = e.map_err(|e| e.to_string())?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let bytes = std::fs::read(&p).map_err(|e| e.to_string())?;
                out.insert(p.strip_prefix(dir).unwrap_or(&p).display().to_string(), hex::encode(Sha256::digest(bytes)));
            }
        }
    }
    Ok(out)
}

fn determinism(s: &Session) -> Result<(bool, String), String> {
    let short = s.path("short.txt");
    std::fs::write(&short, "train.epochs = 3\ntrain.lr_drop_epoch = 2\nfinetune.epochs = 2\nshortcut.steps = 200\n").map_err(|e| e.to_string())?;
    let cfg = short.to_str().ok_or("path")?.to_string();
    let commands: Vec<Vec<String>> = [
        "gen-data --seed 3 --out {o}",
        "train --config {c} --manifest data/manifest.tsv --seed 5 --out {o}",
        "train --config {c} --manifest data/manifest.tsv --variant cnn_baseline --out {o}",
        "finetune --config {c} --manifest data/manifest_aux.tsv --checkpoint train_attn_query/model.adtrck --loss img --out {o}",
        "eval --manifest data/manifest.tsv --checkpoint train_attn_query/model.adtrck --out {o}",
        "score --checkpoint train_attn_query/model.adtrck --input data/test/anomalous_0003.adtrft --out {o}",
        "grad-check --out {o}",
        "shortcut-exp --config {c} --out {o}",
    ]
    .iter()
    .map(|t| t.split(' ').map(|w| w.replace("{c}", &cfg)).collect())
    .collect();
    let mut identical = 0;
    let mut differing = Vec::new();
    for (i, template) in commands.iter().enumerate() {
        let mut digests = Vec::new();
        for rep in 0..2 {
            let out = format!("repeat/{i}_{rep}");
            let args: Vec<String> = template.iter().map(|w| w.replace("{o}", &out)).collect();
            let argv: Vec<&str> = args.iter().map(String::as_str).collect();
            s.ok(&argv)?;
            digests.push(digest_dir(&s.path(&out))?);
        }
        if digests[0] == digests[1] && !digests[0].is_empty() {
            identical += 1;
        } else {
            differing.push(template[0].clone());
        }
    }
    Ok((
        differing.is_empty(),
        format!("{identical}/{} subcommand runs byte-identical across repeats (reports, checkpoints, logs, maps){}", commands.len(), if differing.is_empty() { String::new() } else { format!(", differing: {differing:?}") }),
    ))
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let dir = tempfile::tempdir().expect("temp dir");
    let mut s = Session {
        root: dir.path().to_path_buf(),
        verdicts: Vec::new(),
    };
    let v = gradient_integrity(&s);
    s.record("gradient-integrity", v);
    s.record("loss-oracles", loss_oracles());
    s.record("auroc-correctness", auroc_correctness());
    let v = end_to_end(&s);
    s.record("end-to-end-detection", v);
    let v = trainer_regression(&s);
    s.record("trainer-regression-bounds", v);
    let v = ablation(&s);
    s.record("ablation-ordering", v);
    let v = shortcut_mechanism(&s);
    s.record("shortcut-mechanism", v);
    let v = anomaly_available(&s);
    s.record("anomaly-available-gain", v);
    let v = format_robustness(&s);
    s.record("format-robustness", v);
    let v = determinism(&s);
    s.record("determinism", v);

    let failed: Vec<&Verdict> = s.verdicts.iter().filter(|v| !v.passed).collect();
    println!("acceptance: {} passed, {} failed", s.verdicts.len() - failed.len(), failed.len());
    if !failed.is_empty() {
        for v in &failed {
            eprintln!("failed {}: {}", v.name, v.detail);
        }
        std::process::exit(1);
    }
}
