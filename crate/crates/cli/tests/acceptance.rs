//! Acceptance gate: one PASS/FAIL line per criterion, nonzero exit on any failure.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use embedit::afs::{
    build_plan, AfsConfig, Ambiguity, AmbiguityDecision, FeatureKey, ImageKey, ResidualFeatureSet,
    DEFAULT_RADIUS_THRESHOLD,
};
use embedit::cqs::{compute_cqs, sweep_weights, CqsConfig, ScoreSet, ScoreTable};
use embedit::io::{self, ResidualIndex};
use embedit::layout::TokenRange;
use embedit::pad::{inject_expression, padding_subset, remove_suppression};
use embedit::stm::{apply_stm, selective_expression, selective_suppression, SelectionReport, Stage};
use embedit::tensor::{project_rows, resolve_signs, row_space_projector, svd, SvdDecomposition};
use embedit::{EmbeddingMatrix, PadPolicy, PromptManifest, StepRange, StmParams};
use embedit_oracles as oracle;
use rand::seq::SliceRandom;
use rand::Rng;

type Outcome = Result<String, String>;
type Criterion<'a> = (&'a str, Box<dyn Fn() -> Outcome + 'a>);

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn mat(rows: &oracle::Rows) -> EmbeddingMatrix {
    EmbeddingMatrix::from_rows(rows).unwrap()
}

fn svd_projection_suite() -> Outcome {
    let start = Instant::now();
    let mut r = oracle::rng(1);
    let (mut worst_rec, mut worst_proj, mut worst_gs) = (0f64, 0f64, 0f64);
    for case in 0..200 {
        let l = r.random_range(1..=12);
        let d = r.random_range(1..=32);
        let rank = if case % 4 == 0 { 1 } else { r.random_range(1..=l.min(d)) };
        let m = oracle::random_low_rank(&mut r, l, d, rank);
        let e = mat(&m);

        let dec = svd(&e).map_err(|e| e.to_string())?;
        let rec = (dec.reconstruct() - e.as_matrix()).norm() / e.frobenius_norm().max(f64::MIN_POSITIVE);
        worst_rec = worst_rec.max(rec);

        let p = row_space_projector(&e).map_err(|e| e.to_string())?;
        let pm = p.matrix();
        let idem = (&pm * &pm - &pm).amax().max((&pm - pm.transpose()).amax());
        worst_proj = worst_proj.max(idem);

        let pad = oracle::random_matrix(&mut r, 4, d);
        let got = project_rows(&mat(&pad), &p).map_err(|e| e.to_string())?;
        let want = oracle::project_onto(&pad, &oracle::gram_schmidt_basis(&m, 1e-8));
        worst_gs = worst_gs.max(oracle::max_abs_diff(&got.to_rows(), &want));
    }
    let elapsed = start.elapsed();
    check(worst_rec <= 1e-5, || format!("reconstruction error {worst_rec:.3e}"))?;
    check(worst_proj <= 1e-6, || {
        format!("projector idempotence/symmetry {worst_proj:.3e}")
    })?;
    check(worst_gs <= 1e-6, || format!("Gram–Schmidt disagreement {worst_gs:.3e}"))?;
    check(elapsed < Duration::from_secs(10), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "200 matrices; rec {worst_rec:.1e}, proj {worst_proj:.1e}, gs {worst_gs:.1e}, {:.2}s",
        elapsed.as_secs_f64()
    ))
}

#[derive(Debug)]
struct Case {
    manifest: PromptManifest,
    e: EmbeddingMatrix,
    target: usize,
}

fn random_case(r: &mut impl Rng) -> Case {
    let k = r.random_range(1..=4);
    let l_id = r.random_range(1..=5);
    let d = r.random_range(2..=24);
    let mut at = l_id;
    let mut ranges = Vec::new();
    for _ in 0..k {
        let l = r.random_range(1..=6);
        ranges.push(TokenRange::new(at, at + l));
        at += l;
    }
    let total = at + r.random_range(0..=8);
    Case {
        manifest: PromptManifest {
            total_len: total,
            dim: d,
            id_range: TokenRange::new(0, l_id),
            image_ranges: ranges,
            pad_range: TokenRange::new(at, total),
        },
        e: mat(&oracle::random_matrix(r, total, d)),
        target: r.random_range(1..=k),
    }
}

fn id_rows_identical(c: &Case, out: &EmbeddingMatrix) -> bool {
    (c.manifest.id_range.start..c.manifest.id_range.end).all(|row| {
        out.row(row)
            .iter()
            .zip(c.e.row(row))
            .all(|(a, b)| a.to_bits() == b.to_bits())
    })
}

fn stm_identity_paths() -> Outcome {
    let mut r = oracle::rng(2);
    let identity = StmParams::identity();
    let mut worst = 0f64;
    let mut apply_runs = 0;
    for _ in 0..50 {
        let c = random_case(&mut r);
        let l_img = r.random_range(1..=6);
        let d = c.e.ncols();
        let target = mat(&oracle::random_matrix(&mut r, l_img, d));
        let e_id = mat(&oracle::random_matrix(&mut r, 3, d));
        for (out, _) in [
            selective_expression(&target, &e_id, &identity).map_err(|e| e.to_string())?,
            selective_suppression(&target, &e_id, &identity).map_err(|e| e.to_string())?,
        ] {
            worst = worst.max((out.as_matrix() - target.as_matrix()).norm() / target.frobenius_norm());
        }

        let (out, _) =
            apply_stm(&c.e, &c.manifest, c.target, &identity, &PadPolicy::disabled()).map_err(|e| e.to_string())?;
        worst = worst.max((out.as_matrix() - c.e.as_matrix()).norm() / c.e.frobenius_norm());
        for (params, policy) in [
            (identity.clone(), PadPolicy::disabled()),
            (StmParams::default(), PadPolicy::default()),
            (StmParams::default(), PadPolicy::disabled()),
        ] {
            let (out, _) = apply_stm(&c.e, &c.manifest, c.target, &params, &policy).map_err(|e| e.to_string())?;
            check(id_rows_identical(&c, &out), || {
                format!("identity rows changed in {c:?}")
            })?;
            apply_runs += 1;
        }
    }
    check(worst <= 1e-5, || format!("identity scaling deviates by {worst:.3e}"))?;
    Ok(format!(
        "50 cases; worst relative deviation {worst:.1e}; {apply_runs} apply_stm runs keep identity rows"
    ))
}

/// `uᵢᵀ·out·vᵢ` for the sign-resolved components of the input.
fn component_gains(dec: &SvdDecomposition, out: &EmbeddingMatrix) -> Vec<f64> {
    (0..dec.effective_rank())
        .map(|i| {
            let u = dec.left.column(i);
            let v = dec.right.row(i).transpose();
            (u.transpose() * out.as_matrix() * v)[(0, 0)]
        })
        .collect()
}

fn audit_report(
    rep: &SelectionReport,
    input: &EmbeddingMatrix,
    out: &EmbeddingMatrix,
    v_ref: &[f64],
) -> Result<usize, String> {
    let n = rep.similarities.len();
    if n == 0 {
        return Ok(0);
    }
    let dec = resolve_signs(&svd(input).unwrap(), input).unwrap();
    let cosines: Vec<f64> = (0..n)
        .map(|i| oracle::cosine(dec.right.row(i).iter().copied().collect::<Vec<_>>().as_slice(), v_ref))
        .collect();
    for (i, (c, s)) in cosines.iter().zip(&rep.similarities).enumerate() {
        check((c - s).abs() <= 1e-9, || {
            format!("component {i}: cosine {c} recomputed, {s} reported")
        })?;
    }
    let zeta = cosines.iter().sum::<f64>() / n as f64;
    check(
        (rep.threshold - zeta).abs() <= 1e-12 * zeta.abs().max(f64::MIN_POSITIVE),
        || format!("threshold {} vs mean {zeta}", rep.threshold),
    )?;
    for (i, (&s, &sel)) in rep.similarities.iter().zip(&rep.selected).enumerate() {
        let expected = match rep.stage {
            Stage::Expression => s > rep.threshold,
            Stage::Suppression => s < rep.threshold,
        };
        check(sel == expected, || {
            format!("component {i}: cosine {s}, ζ {}, selected {sel}", rep.threshold)
        })?;
    }
    let gains = component_gains(&dec, out);
    for (i, g) in gains.iter().enumerate() {
        let want = rep.scale_factors[i] * rep.singular_values[i];
        check((g - want).abs() <= 1e-8 * rep.singular_values[0].max(1.0), || {
            format!("component {i} has σ' = {g}, report says {want}")
        })?;
    }
    Ok(rep.selected_count())
}

fn stm_selection_soundness() -> Outcome {
    let mut r = oracle::rng(3);
    let p = StmParams::default();
    let mut selected = 0;
    for _ in 0..100 {
        let d = r.random_range(2..=32);
        let l = r.random_range(1..=10);
        let rank = r.random_range(1..=l.min(d));
        let target = mat(&oracle::random_low_rank(&mut r, l, d, rank));
        let l_id = r.random_range(1..=6);
        let e_id = mat(&oracle::random_matrix(&mut r, l_id, d));
        let (id_rows, t_rows) = (e_id.to_rows(), target.to_rows());
        let exp_ref: oracle::Rows = id_rows.iter().chain(&t_rows).cloned().collect();
        let (out, rep) = selective_expression(&target, &e_id, &p).map_err(|e| e.to_string())?;
        selected += audit_report(&rep, &target, &out, &oracle::reference_vector(&exp_ref, &t_rows))?;
        let (out, rep) = selective_suppression(&target, &e_id, &p).map_err(|e| e.to_string())?;
        selected += audit_report(&rep, &target, &out, &oracle::reference_vector(&id_rows, &id_rows))?;
    }
    check(selected > 0, || "no component was ever selected".into())?;
    Ok(format!(
        "100 cases, both stages; {selected} selected components audited"
    ))
}

fn padding_algebra() -> Outcome {
    let mut r = oracle::rng(4);
    let (mut affine, mut inside, mut ortho) = (0f64, 0f64, 0f64);
    for _ in 0..100 {
        let d = r.random_range(2..=24);
        let l_exp = r.random_range(1..=6);
        let rank = r.random_range(1..=l_exp.min(d));
        let e_exp = mat(&oracle::random_low_rank(&mut r, l_exp, d, rank));
        let l_sup = r.random_range(1..=5);
        let e_sup = mat(&oracle::random_matrix(&mut r, l_sup, d));
        let n_pad = r.random_range(0..=10);
        let pad = if n_pad == 0 {
            EmbeddingMatrix::zeros(0, d)
        } else {
            mat(&oracle::random_matrix(&mut r, n_pad, d))
        };
        let gamma = r.random_range(0.0..=1.0);
        let run = |g| inject_expression(&pad, &e_exp, g).map_err(|e| e.to_string());
        let (r0, r1, rg) = (run(0.0)?, run(1.0)?, run(gamma)?);
        let blend = r0.as_matrix() * (1.0 - gamma) + r1.as_matrix() * gamma;
        affine = affine.max((rg.as_matrix() - blend).amax());

        let p_exp = row_space_projector(&e_exp).map_err(|e| e.to_string())?;
        let again = project_rows(&r1, &p_exp).map_err(|e| e.to_string())?;
        inside = inside.max((again.as_matrix() - r1.as_matrix()).amax());

        let removed = remove_suppression(&pad, std::slice::from_ref(&e_sup), 1.0).map_err(|e| e.to_string())?;
        let p_sup = row_space_projector(&e_sup).map_err(|e| e.to_string())?;
        let residue = project_rows(&removed, &p_sup).map_err(|e| e.to_string())?;
        ortho = ortho.max(residue.frobenius_norm() / removed.frobenius_norm().max(1.0));

        let l = r.random_range(0..=12);
        let sub = padding_subset(&pad, l);
        check(sub.nrows() == l.min(pad.nrows()), || {
            format!("subset of {} rows for l_exp {l}", sub.nrows())
        })?;
    }
    check(affine <= 1e-9, || format!("affinity error {affine:.3e}"))?;
    check(inside <= 1e-6, || format!("injection leaves row space by {inside:.3e}"))?;
    check(ortho <= 1e-6, || format!("removal residue {ortho:.3e}"))?;
    Ok(format!(
        "100 cases; affine {affine:.1e}, in-span {inside:.1e}, orthogonal {ortho:.1e}"
    ))
}

/// Two unit vectors whose radius about their centroid is `radius`.
fn pair_with_radius(radius: f64, dim: usize) -> (Vec<f64>, Vec<f64>) {
    let half = radius.asin();
    let mut a = vec![0.0; dim];
    let mut b = vec![0.0; dim];
    (a[0], a[1]) = (half.cos(), half.sin());
    (b[0], b[1]) = (half.cos(), -half.sin());
    (a, b)
}

fn afs_constants() -> Outcome {
    let label = |radius| AmbiguityDecision::from_radius(radius, DEFAULT_RADIUS_THRESHOLD, 23, 4).label;
    check(DEFAULT_RADIUS_THRESHOLD == 0.1285, || "threshold is not 0.1285".into())?;
    check(label(0.1571) == Ambiguity::High, || "0.1571 not high".into())?;
    check(label(0.1032) == Ambiguity::Low, || "0.1032 not low".into())?;
    check(label(0.1285) == Ambiguity::Low, || "0.1285 not low".into())?;

    let cfg = AfsConfig::default();
    let plan = build_plan(&AmbiguityDecision::from_radius(0.1571, cfg.threshold, 23, 4), &cfg);
    check(plan.active, || "high plan inactive".into())?;
    check(plan.share_blocks == [0, 1, 2, 17, 18], || {
        format!("blocks {:?}", plan.share_blocks)
    })?;
    check(plan.share_steps == StepRange::new(1, 6), || {
        format!("steps {:?}", plan.share_steps)
    })?;
    let low = build_plan(&AmbiguityDecision::from_radius(0.1032, cfg.threshold, 23, 4), &cfg);
    check(!low.active, || "low plan active".into())?;

    for (radius, want) in [(0.1571, Ambiguity::High), (0.1032, Ambiguity::Low)] {
        let (a, b) = pair_with_radius(radius, 16);
        let mut set = ResidualFeatureSet::new();
        set.insert(FeatureKey::new(23, 4, ImageKey::Image(0)), a).unwrap();
        set.insert(FeatureKey::new(23, 4, ImageKey::Image(1)), b).unwrap();
        let dec = embedit::afs::classify_ambiguity(&set, 2, &cfg).map_err(|e| e.to_string())?;
        check((dec.radius - radius).abs() < 1e-12 && dec.label == want, || {
            format!("{dec:?}")
        })?;
    }
    Ok("0.1571 → high, 0.1032 → low, 0.1285 → low; plan [0,1,2,17,18] × [1,6]".into())
}

fn to_table(sets: &[oracle::ScoreSet]) -> ScoreTable {
    ScoreTable {
        sets: sets
            .iter()
            .enumerate()
            .map(|(i, s)| ScoreSet {
                set_id: format!("s{i}"),
                t: s.t.clone(),
                a: s.a.clone(),
                dist: s.dist.clone(),
            })
            .collect(),
    }
}

fn permuted(sets: &[oracle::ScoreSet], r: &mut impl Rng) -> Vec<oracle::ScoreSet> {
    let mut out: Vec<oracle::ScoreSet> = sets
        .iter()
        .map(|s| {
            let mut order: Vec<usize> = (0..s.t.len()).collect();
            order.shuffle(r);
            oracle::ScoreSet {
                t: order.iter().map(|&i| s.t[i]).collect(),
                a: order.iter().map(|&i| s.a[i]).collect(),
                dist: order
                    .iter()
                    .map(|&i| order.iter().map(|&j| s.dist[i][j]).collect())
                    .collect(),
            }
        })
        .collect();
    out.shuffle(r);
    out
}

fn cqs_formula_oracle() -> Outcome {
    let mut r = oracle::rng(6);
    let (mut worst, mut worst_perm) = (0f64, 0f64);
    for _ in 0..50 {
        let n_sets = r.random_range(1..=6);
        let sets = oracle::random_score_sets(&mut r, n_sets, 6);
        let (mu, tau, lambda) = (
            r.random_range(0.0..=1.0),
            r.random_range(0.0..=1.0),
            r.random_range(0.0..=1.0),
        );
        let cfg = CqsConfig {
            mu,
            tau,
            lambda,
            ..CqsConfig::default()
        };
        for cfg in [cfg, CqsConfig::default()] {
            let got = compute_cqs(&to_table(&sets), &cfg).map_err(|e| e.to_string())?;
            let want = oracle::cqs_direct(&sets, cfg.mu, cfg.tau, cfg.lambda, cfg.epsilon);
            worst = worst.max((got.cqs_har - want.cqs).abs());
            for (im, h) in got.images.iter().zip(&want.h) {
                worst = worst.max((im.h - h).abs());
            }
            let perm = compute_cqs(&to_table(&permuted(&sets, &mut r)), &cfg).map_err(|e| e.to_string())?;
            worst_perm = worst_perm.max((perm.cqs_har - got.cqs_har).abs());
        }

        let gap_free: Vec<oracle::ScoreSet> = sets
            .iter()
            .map(|s| oracle::ScoreSet {
                a: s.t.clone(),
                ..s.clone()
            })
            .collect();
        let b = compute_cqs(&to_table(&gap_free), &CqsConfig::default()).map_err(|e| e.to_string())?;
        check(b.images.iter().all(|im| im.d_star == im.d_scaled), || {
            "gap-free d* ≠ s".into()
        })?;

        let at0 = compute_cqs(
            &to_table(&sets),
            &CqsConfig {
                lambda: 0.0,
                ..CqsConfig::default()
            },
        )
        .map_err(|e| e.to_string())?;
        let at1 = compute_cqs(&to_table(&sets), &CqsConfig::default()).map_err(|e| e.to_string())?;
        for im in &at0.images {
            check(
                (im.penalty - at0.delta_neg_mean.abs()).abs() < 1e-15 && (im.reward - at0.delta_pos_mean).abs() < 1e-15,
                || format!("λ=0 terms for {im:?}"),
            )?;
        }
        for im in &at1.images {
            check(
                im.penalty == (-im.delta).max(0.0) && im.reward == im.delta.max(0.0),
                || format!("λ=1 terms for {im:?}"),
            )?;
        }
    }
    check(worst <= 1e-9, || format!("oracle disagreement {worst:.3e}"))?;
    check(worst_perm <= 1e-12, || format!("permutation drift {worst_perm:.3e}"))?;
    Ok(format!(
        "50 tables; oracle {worst:.1e}, permutation {worst_perm:.1e}; gap-free and λ endpoints hold"
    ))
}

fn shifted(sets: &[oracle::ScoreSet], gap: f64) -> Vec<oracle::ScoreSet> {
    sets.iter()
        .map(|s| {
            let t: Vec<f64> =
                s.t.iter()
                    .map(|&t| if gap > 0.0 { t.min(1.0 - gap) } else { t.max(-gap) })
                    .collect();
            let a = t.iter().map(|&t| t + gap).collect();
            oracle::ScoreSet {
                t,
                a,
                dist: s.dist.clone(),
            }
        })
        .collect()
}

fn cqs_monotonicity(bin: &Path, work: &Path) -> Outcome {
    let mut r = oracle::rng(7);
    let weights: Vec<f64> = (1..=10).map(|i| f64::from(i) / 10.0).collect();
    for _ in 0..50 {
        let n_sets = r.random_range(1..=5);
        let sets = oracle::random_score_sets(&mut r, n_sets, 5);
        let gap = r.random_range(0.01..0.4);
        let neg = to_table(&shifted(&sets, -gap));
        let grid: Vec<(f64, f64)> = weights.iter().map(|&w| (w, 0.5)).collect();
        let curve = sweep_weights(&neg, &CqsConfig::default(), &grid).map_err(|e| e.to_string())?;
        check(curve.windows(2).all(|w| w[1].cqs <= w[0].cqs), || {
            format!("μ sweep increased: {curve:?}")
        })?;
        let pos = to_table(&shifted(&sets, gap));
        let grid: Vec<(f64, f64)> = weights.iter().map(|&w| (0.5, w)).collect();
        let curve = sweep_weights(&pos, &CqsConfig::default(), &grid).map_err(|e| e.to_string())?;
        check(curve.windows(2).all(|w| w[1].cqs >= w[0].cqs), || {
            format!("τ sweep decreased: {curve:?}")
        })?;
    }

    let scores = work.join("mono_scores.json");
    let sets = oracle::random_score_sets(&mut r, 3, 4);
    std::fs::write(&scores, serde_json::to_string(&to_table(&sets)).unwrap()).unwrap();
    let out = work.join("mono_out.json");
    let status = run_cli(bin, &["score", "--scores", s(&scores), "--out", s(&out)]).0;
    check(status == 0, || format!("score exited {status}"))?;
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
    let c = &v["config"];
    check(c["mu"] == 0.5 && c["tau"] == 0.5 && c["lambda"] == 1.0, || {
        format!("config echoed as {c}")
    })?;
    Ok("50 tables per direction monotone; defaults μ=τ=0.5, λ=1 echoed".into())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn run_cli(bin: &Path, args: &[&str]) -> (i32, String) {
    let out = Command::new(bin).args(args).output().expect("binary runs");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn error_kind(stderr: &str) -> String {
    stderr
        .lines()
        .filter_map(|l| serde_json::from_str::<serde_json::Value>(l).ok())
        .find_map(|v| v["error"].as_str().map(str::to_string))
        .unwrap_or_default()
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_file() {
            files.insert(
                path.strip_prefix(dir).unwrap().to_path_buf(),
                std::fs::read(&path).unwrap(),
            );
        }
    }
    files
}

struct Fixture {
    embedding: PathBuf,
    manifest: PathBuf,
    params: PathBuf,
    residuals: PathBuf,
    scores: PathBuf,
    grid: PathBuf,
}

fn write_fixture(dir: &Path) -> Fixture {
    let manifest = PromptManifest {
        total_len: 22,
        dim: 16,
        id_range: TokenRange::new(0, 4),
        image_ranges: vec![TokenRange::new(4, 8), TokenRange::new(8, 11), TokenRange::new(11, 15)],
        pad_range: TokenRange::new(15, 22),
    };
    let e = mat(&oracle::seeded_matrix(81, 22, 16));
    let f = Fixture {
        embedding: dir.join("e.npy"),
        manifest: dir.join("manifest.json"),
        params: dir.join("params.json"),
        residuals: dir.join("res"),
        scores: dir.join("scores.json"),
        grid: dir.join("grid.csv"),
    };
    io::save_array(&e, &f.embedding).unwrap();
    std::fs::write(&f.manifest, serde_json::to_string(&manifest).unwrap()).unwrap();
    std::fs::write(&f.params, r#"{"gamma": 0.5}"#).unwrap();

    let (a, b) = pair_with_radius(0.1571, 12);
    let mut set = ResidualFeatureSet::new();
    set.insert(FeatureKey::new(23, 4, ImageKey::Image(0)), a).unwrap();
    set.insert(FeatureKey::new(23, 4, ImageKey::Image(1)), b).unwrap();
    set.insert(FeatureKey::new(23, 4, ImageKey::Identity), vec![0.5; 12])
        .unwrap();
    let index = ResidualIndex {
        dim: 12,
        k: 2,
        available: vec![[23, 4]],
    };
    io::save_residuals(&f.residuals, &index, &set).unwrap();

    let sets = oracle::random_score_sets(&mut oracle::rng(82), 4, 5);
    std::fs::write(&f.scores, serde_json::to_string(&to_table(&sets)).unwrap()).unwrap();
    std::fs::write(&f.grid, "mu,tau\n0.5,0.5\n0.2,0.9\n1.0,0.1\n").unwrap();
    f
}

fn determinism_and_io(bin: &Path, work: &Path) -> Outcome {
    let fx = write_fixture(work);
    let runs: Vec<(&str, Vec<String>, bool)> = vec![
        (
            "modify",
            vec![
                "--embedding".into(),
                s(&fx.embedding).into(),
                "--manifest".into(),
                s(&fx.manifest).into(),
                "--params".into(),
                s(&fx.params).into(),
                "--target".into(),
                "2".into(),
            ],
            false,
        ),
        ("classify", vec!["--residuals".into(), s(&fx.residuals).into()], false),
        ("score", vec!["--scores".into(), s(&fx.scores).into()], false),
        (
            "sweep",
            vec![
                "--scores".into(),
                s(&fx.scores).into(),
                "--grid".into(),
                s(&fx.grid).into(),
            ],
            false,
        ),
        (
            "diagnose",
            vec![
                "--embedding".into(),
                s(&fx.embedding).into(),
                "--manifest".into(),
                s(&fx.manifest).into(),
            ],
            true,
        ),
    ];
    for (cmd, args, out_is_dir) in &runs {
        let mut snaps = Vec::new();
        for run in 0..2 {
            let dir = work.join(format!("{cmd}_{run}"));
            std::fs::create_dir_all(&dir).unwrap();
            let out = if *out_is_dir {
                dir.join("diag")
            } else {
                dir.join("out.npy")
            };
            let mut full: Vec<&str> = vec![cmd];
            full.extend(args.iter().map(String::as_str));
            full.extend(["--out", s(&out)]);
            let (code, stderr) = run_cli(bin, &full);
            check(code == 0, || format!("{cmd} exited {code}: {stderr}"))?;
            snaps.push(snapshot(if *out_is_dir { &out } else { &dir }));
        }
        check(!snaps[0].is_empty() && snaps[0] == snaps[1], || {
            format!("{cmd} output differs between runs")
        })?;
    }

    let plan: serde_json::Value =
        serde_json::from_slice(&std::fs::read(work.join("classify_0/out.npy")).unwrap()).unwrap();
    check(plan["plan"]["active"] == true, || {
        format!("0.1571 dump set gave {plan}")
    })?;
    let sweep = std::fs::read_to_string(work.join("sweep_0/out.npy")).unwrap();
    let score: serde_json::Value =
        serde_json::from_slice(&std::fs::read(work.join("score_0/out.npy")).unwrap()).unwrap();
    let first = sweep
        .lines()
        .nth(1)
        .unwrap()
        .rsplit(',')
        .next()
        .unwrap()
        .parse::<f64>()
        .unwrap();
    check(first == score["cqs_har"].as_f64().unwrap(), || {
        "sweep (0.5, 0.5) differs from score".into()
    })?;

    // CLI modify against the library on the same (f32-quantized) input.
    let e = io::load_matrix(&fx.embedding).unwrap();
    let manifest = io::load_manifest(&fx.manifest).unwrap();
    let (lib, _) = apply_stm(&e, &manifest, 2, &StmParams::default(), &PadPolicy::default()).unwrap();
    let cli_bytes = std::fs::read(work.join("modify_0/out.npy")).unwrap();
    check(io::encode_matrix(&lib).unwrap() == cli_bytes, || {
        "CLI modify differs from library".into()
    })?;

    let ident_out = work.join("ident.npy");
    let id_args = [
        "modify",
        "--embedding",
        s(&fx.embedding),
        "--manifest",
        s(&fx.manifest),
        "--target",
        "1",
        "--set",
        "alpha_exp=0",
        "--set",
        "alpha_sup=0",
        "--set",
        "beta_sup=1",
        "--set",
        "pad_subset=false",
        "--out",
        s(&ident_out),
    ];
    let (code, stderr) = run_cli(bin, &id_args);
    check(code == 0, || format!("identity modify exited {code}: {stderr}"))?;
    let back = io::load_matrix(&ident_out).unwrap();
    let dev = (back.as_matrix() - e.as_matrix()).norm() / e.frobenius_norm();
    check(dev <= 1e-5, || format!("identity modify deviates by {dev:.3e}"))?;

    let mut r = oracle::rng(83);
    for _ in 0..20 {
        let m = if r.random_bool(0.2) {
            EmbeddingMatrix::zeros(0, r.random_range(1..=8))
        } else {
            let (l, d) = (r.random_range(1..=8), r.random_range(1..=8));
            mat(&oracle::random_matrix(&mut r, l, d))
        };
        let bytes = io::encode_matrix(&m).unwrap();
        let path = work.join("rt.npy");
        std::fs::write(&path, &bytes).unwrap();
        let again = io::encode_matrix(&io::load_matrix(&path).unwrap()).unwrap();
        check(again == bytes, || "NPY round trip changed bytes".into())?;
    }

    let bad = work.join("bad");
    std::fs::create_dir_all(&bad).unwrap();
    let fortran = bad.join("f.npy");
    let mut bytes = io::encode_matrix(&e).unwrap();
    let header_end = 10 + u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let header = String::from_utf8(bytes[10..header_end].to_vec())
        .unwrap()
        .replace("False", "True ");
    bytes.splice(10..header_end, header.into_bytes());
    std::fs::write(&fortran, &bytes).unwrap();
    let truncated = bad.join("t.npy");
    let full = io::encode_matrix(&e).unwrap();
    std::fs::write(&truncated, &full[..full.len() - 3]).unwrap();
    let sidecar_dir = bad.join("res");
    std::fs::create_dir_all(&sidecar_dir).unwrap();
    std::fs::write(sidecar_dir.join("residuals.json"), "{\"dim\": \"x\"}").unwrap();
    let probe_dir = bad.join("noprobe");
    io::save_residuals(
        &probe_dir,
        &ResidualIndex {
            dim: 3,
            k: 2,
            available: vec![],
        },
        &ResidualFeatureSet::new(),
    )
    .unwrap();
    let empty_scores = bad.join("empty.json");
    std::fs::write(&empty_scores, "{\"sets\": []}").unwrap();
    let overlap = bad.join("overlap.json");
    std::fs::write(
        &overlap,
        r#"{"total_len":22,"dim":16,"id_range":[0,5],"image_ranges":[[4,8]],"pad_range":[8,22]}"#,
    )
    .unwrap();
    let o = s(&bad.join("o.json")).to_string();
    let cases: Vec<(&str, Vec<&str>, i32, &str)> = vec![
        (
            "missing manifest flag",
            vec!["modify", "--embedding", s(&fx.embedding), "--target", "1", "--out", &o],
            2,
            "SchemaError",
        ),
        (
            "nonexistent manifest",
            vec![
                "modify",
                "--embedding",
                s(&fx.embedding),
                "--manifest",
                "/nonexistent/m.json",
                "--target",
                "1",
                "--out",
                &o,
            ],
            2,
            "IoError",
        ),
        (
            "overlapping manifest",
            vec![
                "modify",
                "--embedding",
                s(&fx.embedding),
                "--manifest",
                s(&overlap),
                "--target",
                "1",
                "--out",
                &o,
            ],
            2,
            "InvariantViolation",
        ),
        (
            "target out of range",
            vec![
                "modify",
                "--embedding",
                s(&fx.embedding),
                "--manifest",
                s(&fx.manifest),
                "--target",
                "9",
                "--out",
                &o,
            ],
            2,
            "IndexOutOfRange",
        ),
        (
            "unknown override",
            vec![
                "modify",
                "--embedding",
                s(&fx.embedding),
                "--manifest",
                s(&fx.manifest),
                "--target",
                "1",
                "--set",
                "alpha=1",
                "--out",
                &o,
            ],
            2,
            "SchemaError",
        ),
        (
            "fortran npy",
            vec![
                "diagnose",
                "--embedding",
                s(&fortran),
                "--manifest",
                s(&fx.manifest),
                "--out",
                &o,
            ],
            2,
            "UnsupportedLayout",
        ),
        (
            "truncated npy",
            vec![
                "diagnose",
                "--embedding",
                s(&truncated),
                "--manifest",
                s(&fx.manifest),
                "--out",
                &o,
            ],
            2,
            "TruncatedPayload",
        ),
        (
            "malformed sidecar",
            vec!["classify", "--residuals", s(&sidecar_dir), "--out", &o],
            2,
            "SchemaError",
        ),
        (
            "missing probe features",
            vec!["classify", "--residuals", s(&probe_dir), "--out", &o],
            3,
            "MissingProbeFeatures",
        ),
        (
            "empty score table",
            vec!["score", "--scores", s(&empty_scores), "--out", &o],
            2,
            "EmptyInput",
        ),
        ("unknown flag", vec!["score", "--bogus"], 2, "UsageError"),
    ];
    for (name, args, want_code, want_kind) in &cases {
        let (code, stderr) = run_cli(bin, args);
        let kind = error_kind(&stderr);
        check(code == *want_code && kind == *want_kind, || {
            format!("{name}: exit {code} kind {kind:?}, expected {want_code} {want_kind}")
        })?;
    }
    check(!bad.join("o.json").exists(), || {
        "a failed run left an output file".into()
    })?;
    Ok(format!(
        "5 subcommands byte-identical across runs; {} error cases exit as documented",
        cases.len()
    ))
}

fn main() -> ExitCode {
    let start = Instant::now();
    let bin = PathBuf::from(env!("CARGO_BIN_EXE_embedit"));
    let work = tempfile::tempdir().expect("temp dir");
    let criteria: Vec<Criterion> = vec![
        ("SVD/projection oracle suite", Box::new(svd_projection_suite)),
        ("STM identity paths", Box::new(stm_identity_paths)),
        ("STM selection soundness", Box::new(stm_selection_soundness)),
        ("Padding algebra", Box::new(padding_algebra)),
        ("AFS constants", Box::new(afs_constants)),
        ("CQS formula oracle", Box::new(cqs_formula_oracle)),
        ("CQS monotonicity", Box::new(|| cqs_monotonicity(&bin, work.path()))),
        ("Determinism + I/O", Box::new(|| determinism_and_io(&bin, work.path()))),
    ];
    let mut failed = 0;
    for (name, run) in &criteria {
        let outcome = catch_unwind(AssertUnwindSafe(run))
            .unwrap_or_else(|p| Err(p.downcast_ref::<String>().cloned().unwrap_or_else(|| "panicked".into())));
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why}");
            }
        }
    }
    let elapsed = start.elapsed();
    let within = elapsed < Duration::from_secs(60);
    if !within {
        failed += 1;
    }
    println!(
        "{}  Full primary suite under 60 s: {:.2}s",
        if within { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
