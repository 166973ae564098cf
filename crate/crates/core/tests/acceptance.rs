// SPDX-License-Identifier: MIT OR Apache-2.0

//! Acceptance suite. Runs every primary criterion at its stated tolerance
//! and prints one PASS/FAIL line per criterion. Exits non-zero if any fail.

mod common;

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use neuron_steer::analysis::{self, PcaMethod};
use neuron_steer::dumpio::{self, ActivationMatrix, Direction, Trait};
use neuron_steer::intervene::{self, InterventionConfig, Mode, SteerDirection};
use neuron_steer::select::{self, NeuronSelection, SelectionParams};
use neuron_steer::stats;
use neuron_steer::toymodel::{self, PlantSpec, ToyModel, ToyModelConfig};
use neuron_steer::Error;
use rand::Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn statistics_oracle() -> Outcome {
    let mut rng = common::rng(0x5747);
    let (mut max_s, mut max_d, mut max_shift, mut max_scale) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for case in 0..200 {
        let n_high = rng.random_range(2..=8);
        let n_low = rng.random_range(2..=8);
        let k = rng.random_range(1..=16);
        let (high, low) = if case % 2 == 0 {
            (
                common::random_matrix(&mut rng, 0, Direction::High, n_high, k),
                common::random_matrix(&mut rng, 0, Direction::Low, n_low, k),
            )
        } else {
            (
                common::grid_matrix(&mut rng, 0, Direction::High, n_high, k),
                common::grid_matrix(&mut rng, 0, Direction::Low, n_low, k),
            )
        };
        let s = stats::build_steering_vector(&high, &low).map_err(err)?;
        let d = stats::cohens_d(&high, &low).map_err(err)?;
        for (a, b) in s.iter().zip(common::naive_steering(&high, &low)) {
            max_s = max_s.max((a - b).abs());
        }
        for (a, b) in d.iter().zip(common::naive_cohens_d(&high, &low)) {
            max_d = max_d.max((a - b).abs());
        }

        // antisymmetry, exact
        let swapped_high = ActivationMatrix::new(0, Direction::High, n_low, k, low.data().to_vec()).map_err(err)?;
        let swapped_low = ActivationMatrix::new(0, Direction::Low, n_high, k, high.data().to_vec()).map_err(err)?;
        let s_sw = stats::build_steering_vector(&swapped_high, &swapped_low).map_err(err)?;
        let d_sw = stats::cohens_d(&swapped_high, &swapped_low).map_err(err)?;
        check(s_sw.iter().zip(&s).all(|(a, b)| *a == -b), || format!("case {case}: swapped s is not -s"))?;
        check(d_sw.iter().zip(&d).all(|(a, b)| *a == -b), || format!("case {case}: swapped d is not -d"))?;

        // shift and scale on the exact grid
        if case % 2 == 1 {
            let shift: Vec<f32> = (0..k).map(|_| rng.random_range(-16i32..=16) as f32 / 4.0).collect();
            let shifted = |m: &ActivationMatrix, dir| {
                let data = m.data().chunks(k).flat_map(|r| r.iter().zip(&shift).map(|(v, c)| v + c)).collect();
                ActivationMatrix::new(0, dir, m.n_samples(), k, data)
            };
            let d_shift = stats::cohens_d(
                &shifted(&high, Direction::High).map_err(err)?,
                &shifted(&low, Direction::Low).map_err(err)?,
            )
            .map_err(err)?;
            for (a, b) in d_shift.iter().zip(&d) {
                max_shift = max_shift.max((a - b).abs());
            }
            let c = [0.5f32, 2.0, 3.0, 1.5, 0.25][case % 5];
            let scaled = |m: &ActivationMatrix, dir| {
                ActivationMatrix::new(0, dir, m.n_samples(), k, m.data().iter().map(|v| v * c).collect())
            };
            let (sh, sl) = (scaled(&high, Direction::High).map_err(err)?, scaled(&low, Direction::Low).map_err(err)?);
            let s_scale = stats::build_steering_vector(&sh, &sl).map_err(err)?;
            let d_scale = stats::cohens_d(&sh, &sl).map_err(err)?;
            for k in 0..k {
                max_scale = max_scale.max((s_scale[k] - f64::from(c) * s[k]).abs());
                max_scale = max_scale.max((d_scale[k] - d[k]).abs());
            }
        }
    }
    check(max_s <= 1e-12 && max_d <= 1e-12, || format!("oracle mismatch s {max_s:e}, d {max_d:e}"))?;
    check(max_shift <= 1e-9, || format!("shift invariance off by {max_shift:e}"))?;
    check(max_scale <= 1e-9, || format!("scale equivariance off by {max_scale:e}"))?;
    Ok(format!(
        "200 cases; max |ds| {max_s:.1e}, max |dd| {max_d:.1e}, shift {max_shift:.1e}, scale {max_scale:.1e}, antisymmetry exact"
    ))
}

fn selection_equivalence() -> Outcome {
    let mut rng = common::rng(0x5e1ec7);
    let mut selected = 0usize;
    for case in 0..100 {
        let k = rng.random_range(2..=64);
        let st = common::random_stats(&mut rng, 3, k);
        let q = rng.random_range(0.05..0.99);
        let tau_d = rng.random_range(0.1..2.0);
        let params = SelectionParams::new(tau_d, q, vec![3]).map_err(err)?;
        let got = select::select_layer(&st, &params).map_err(err)?;
        let (high, low) = common::brute_force_select(&st.cohens_d, &st.steering, tau_d, q);
        let got_high: Vec<usize> = got.high.iter().map(|n| n.idx).collect();
        let got_low: Vec<usize> = got.low.iter().map(|n| n.idx).collect();
        check(got_high == high && got_low == low, || {
            format!("case {case}: got {got_high:?}/{got_low:?}, oracle {high:?}/{low:?}")
        })?;
        check(got_high.iter().all(|i| !got_low.contains(i)), || format!("case {case}: overlap"))?;
        let bound = ((1.0 - q) * k as f64).ceil() as usize + 1;
        check(got.len() <= bound, || format!("case {case}: {} selected > bound {bound}", got.len()))?;
        selected += got.len();
    }
    Ok(format!("100 cases match brute force, {selected} neurons selected in total, sets disjoint, bound held"))
}

fn sparsity_at_scale() -> Outcome {
    let k = 14_336;
    let layers: Vec<usize> = (12..=31).collect();
    let spec = PlantSpec::random(layers.clone(), k, 100, 100, 4.0, 1.0, 50, 0x5a).map_err(err)?;
    let dump = toymodel::plant(&spec).map_err(err)?;
    let all = stats::compute_all_layer_stats(&dump, None).map_err(err)?;
    check(all.len() == 20, || format!("{} layer stats, expected 20", all.len()))?;
    let params = SelectionParams::new(0.8, 0.995, layers).map_err(err)?;
    let selection = select::select_all(Trait::Openness, &all, &params).map_err(err)?;
    let max_layer = selection.layers.iter().map(|l| l.len()).max().unwrap_or(0);
    check(max_layer <= 72, || format!("a layer selected {max_layer} > 72 neurons"))?;
    let reduction = 1.0 - selection.totals.total as f64 / 40_000.0;
    check(reduction >= 0.96, || format!("reduction {:.2}% < 96%", 100.0 * reduction))?;
    Ok(format!(
        "K = 14,336 x 20 layers, 200 planted per layer: max {max_layer} per layer, totals {}/{}, {:.1}% fewer than 20,000 per direction",
        selection.totals.high,
        selection.totals.low,
        100.0 * reduction
    ))
}

fn planted_recovery() -> Outcome {
    let k = 512;
    let spec = PlantSpec::random(vec![0, 1, 2, 3], k, 10, 10, 4.0, 1.0, 1000, 0xbeef).map_err(err)?;
    let dump = toymodel::plant(&spec).map_err(err)?;
    let all = stats::compute_all_layer_stats(&dump, None).map_err(err)?;
    let params = SelectionParams::new(0.8, 0.95, vec![0, 1, 2, 3]).map_err(err)?;
    let selection = select::select_all(Trait::Openness, &all, &params).map_err(err)?;
    let rec = toymodel::planted_recovery(&spec, &selection);
    let cap = (0.005 * k as f64).ceil() as usize;
    check(rec.overall_rate() >= 0.95, || format!("overall recovery {:.3}", rec.overall_rate()))?;
    check(rec.high_rate() >= 0.95 && rec.low_rate() >= 0.95, || {
        format!("high {:.3} low {:.3}", rec.high_rate(), rec.low_rate())
    })?;
    check((rec.high_rate() - rec.low_rate()).abs() <= 0.05, || "asymmetric recovery".into())?;
    check(rec.max_unplanted() <= cap, || format!("{} unplanted selected > {cap}", rec.max_unplanted()))?;
    Ok(format!(
        "q 0.95, tau_d 0.8: high {:.1}%, low {:.1}%, max unplanted {} (cap {cap})",
        100.0 * rec.high_rate(),
        100.0 * rec.low_rate(),
        rec.max_unplanted()
    ))
}

fn small_selection() -> Result<(NeuronSelection, BTreeMap<usize, Vec<f64>>), String> {
    let spec = PlantSpec::random(vec![1, 2], 64, 4, 3, 3.0, 1.0, 60, 17).map_err(err)?;
    let dump = toymodel::plant(&spec).map_err(err)?;
    let all = stats::compute_all_layer_stats(&dump, None).map_err(err)?;
    let params = SelectionParams::new(0.8, 0.8, vec![1, 2]).map_err(err)?;
    let sel = select::select_all(Trait::Neuroticism, &all, &params).map_err(err)?;
    let steering = all.into_iter().map(|(l, s)| (l, s.steering)).collect();
    Ok((sel, steering))
}

fn intervention_algebra() -> Outcome {
    let (sel, steering) = small_selection()?;
    check(sel.totals.total > 0, || "empty selection".into())?;
    let mut rng = common::rng(99);
    let hidden: Vec<f64> = (0..64).map(|_| rng.random_range(0.5..3.0)).collect();

    for mode in [Mode::Uniform, Mode::Weighted] {
        for dir in [SteerDirection::Enhance, SteerDirection::Suppress] {
            let zero = intervene::build_config(&sel, &steering, 0.0, mode, dir).map_err(err)?;
            for l in &zero.layers {
                check(l.edits.iter().all(|e| e.delta == 0.0), || "gamma 0 gave a non-zero delta".into())?;
                let out = l.apply(&hidden).map_err(err)?;
                check(out == hidden, || "gamma 0 apply is not the identity".into())?;
            }
        }
        let enh = intervene::build_config(&sel, &steering, 1.7, mode, SteerDirection::Enhance).map_err(err)?;
        let sup = intervene::build_config(&sel, &steering, 1.7, mode, SteerDirection::Suppress).map_err(err)?;
        for (e, s) in enh.layers.iter().zip(&sup.layers) {
            let round = s.apply(&e.apply(&hidden).map_err(err)?).map_err(err)?;
            let worst = round.iter().zip(&hidden).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            check(worst <= 1e-12, || format!("enhance then suppress off by {worst:e}"))?;
        }
    }

    let uni = intervene::build_config(&sel, &steering, 2.0, Mode::Uniform, SteerDirection::Enhance).map_err(err)?;
    let wtd = intervene::build_config(&sel, &steering, 2.0, Mode::Weighted, SteerDirection::Enhance).map_err(err)?;
    for (u, w) in uni.layers.iter().zip(&wtd.layers) {
        let ranked = select::rank_weights(
            &sel.layer(u.layer).unwrap().union().iter().map(|n| (n.idx, n.d)).collect::<Vec<_>>(),
        );
        for (eu, ew) in u.edits.iter().zip(&w.edits) {
            let top = ranked[&eu.idx] == 1.0;
            check(ew.delta.abs() <= eu.delta.abs(), || format!("weighted delta exceeds uniform at {}", eu.idx))?;
            check((ew.delta.abs() == eu.delta.abs()) == top || eu.delta == 0.0, || {
                format!("equality off rank 0 at {}", eu.idx)
            })?;
        }
    }

    let w = select::rank_weights(&[(4, 0.9), (1, -3.0), (7, 2.5), (2, -1.1), (9, 1.0)]);
    let expected = [(1, 1.0), (7, 0.9375), (2, 0.875), (9, 0.8125), (4, 0.75)];
    for (idx, want) in expected {
        check(w[&idx] == want, || format!("weight of {idx} is {} not {want}", w[&idx]))?;
    }
    Ok("gamma 0 identity, enhance/suppress inverse <= 1e-12, weighted <= uniform, m = 5 weights exact".into())
}

fn toy_end_to_end() -> Outcome {
    let model = ToyModel::new(ToyModelConfig::default()).map_err(err)?;
    let pairs = toymodel::toy_prompt_pairs(64, 120, 5).map_err(err)?;
    let layers: Vec<usize> = (0..4).collect();
    let dump = model.capture_dump(&pairs, &layers, Trait::Openness, "toy").map_err(err)?;
    let all = stats::compute_all_layer_stats(&dump, None).map_err(err)?;
    let params = SelectionParams::new(0.8, 0.9, layers.clone()).map_err(err)?;
    let sel = select::select_all(Trait::Openness, &all, &params).map_err(err)?;
    let steering: BTreeMap<usize, Vec<f64>> = all.into_iter().map(|(l, s)| (l, s.steering)).collect();
    let config = intervene::build_config(&sel, &steering, 1.5, Mode::Weighted, SteerDirection::Enhance).map_err(err)?;
    check(config.n_edits() > 0, || "toy selection is empty".into())?;

    let mut checked = 0usize;
    for p in pairs.iter().take(20) {
        for tokens in [&p.high, &p.low] {
            let plain = model.forward(tokens).map_err(err)?;
            let empty = model.forward_intervened(tokens, &InterventionConfig::empty(Trait::Openness)).map_err(err)?;
            check(
                empty.logits.iter().zip(&plain.logits).all(|(a, b)| a.to_bits() == b.to_bits()),
                || "empty config changed logits".into(),
            )?;
            let out = model.forward_intervened(tokens, &config).map_err(err)?;
            for le in &config.layers {
                let want = le.apply(&out.pre_edit[le.layer]).map_err(err)?;
                check(out.captures[le.layer] == want, || format!("layer {} capture != apply(pre-edit)", le.layer))?;
                // each layer alone: the unedited hidden is the plain capture
                let single = InterventionConfig {
                    layers: vec![le.clone()],
                    ..config.clone()
                };
                let one = model.forward_intervened(tokens, &single).map_err(err)?;
                let want = le.apply(&plain.captures[le.layer]).map_err(err)?;
                check(one.captures[le.layer] == want, || format!("layer {} capture != apply(plain)", le.layer))?;
                checked += 1;
            }
            let first = config.layers[0].layer;
            check(out.pre_edit[first] == plain.captures[first], || "first configured layer pre-edit drifted".into())?;
        }
    }
    Ok(format!(
        "{} edits over {} layers; {checked} layer checks exact; empty config bitwise identical",
        config.n_edits(),
        config.layers.len()
    ))
}

fn pca_checks() -> Outcome {
    // variance only along neuron 3
    let mut rng = common::rng(3);
    let row = |v: f32| {
        let mut r = vec![1.0f32; 6];
        r[3] = v;
        r
    };
    let high: Vec<Vec<f32>> = (0..5).map(|_| row(rng.random_range(-2.0..2.0))).collect();
    let low: Vec<Vec<f32>> = (0..5).map(|_| row(rng.random_range(-2.0..2.0))).collect();
    let h = ActivationMatrix::from_rows(0, Direction::High, &high).map_err(err)?;
    let l = ActivationMatrix::from_rows(0, Direction::Low, &low).map_err(err)?;
    for method in [PcaMethod::Covariance, PcaMethod::Gram] {
        let r = analysis::pca_layer_with(&h, &l, method).map_err(err)?;
        check((r.explained_variance_ratio[0] - 1.0).abs() <= 1e-8, || {
            format!("{method:?}: evr[0] = {}", r.explained_variance_ratio[0])
        })?;
        check((r.components[0][3] - 1.0).abs() <= 1e-8, || format!("{method:?}: PC1 is not e3"))?;
    }

    let spec = PlantSpec::random(vec![0], 128, 5, 5, 4.0, 1.0, 200, 21).map_err(err)?;
    let dump = toymodel::plant(&spec).map_err(err)?;
    let acts = dump.layer(0).unwrap();
    let r = analysis::pca_layer(&acts.high, &acts.low).map_err(err)?;
    let cos = common::dot(&r.components[0], &spec.planted_direction(0)).abs();
    check(cos >= 0.95, || format!("|cos(PC1, planted)| = {cos:.4}"))?;

    let mut scores = Vec::new();
    for shift in [0.0, 1.0, 2.0, 4.0] {
        let mut s = spec.clone();
        s.shift = shift;
        let dump = toymodel::plant(&s).map_err(err)?;
        let acts = dump.layer(0).unwrap();
        scores.push(analysis::separation_score(&analysis::pca_layer(&acts.high, &acts.low).map_err(err)?).map_err(err)?);
    }
    check(scores.windows(2).all(|w| w[1] > w[0]), || format!("separation not monotone: {scores:?}"))?;

    let rows = analysis::census(&[0.4, 0.9, -1.2], &[0.5, 0.8, 1.0]);
    let counts: Vec<usize> = rows.iter().map(|r| r.count).collect();
    check(counts == [2, 2, 1], || format!("census counts {counts:?}"))?;
    let d: Vec<f64> = (0..500).map(|_| rng.random_range(-3.0..3.0)).collect();
    let thresholds: Vec<f64> = (0..30).map(|i| i as f64 * 0.1).collect();
    let c = analysis::census(&d, &thresholds);
    check(c.windows(2).all(|w| w[1].count <= w[0].count), || "census not monotone".into())?;
    Ok(format!(
        "single axis evr 1, |cos| {cos:.4}, separation {:.2} < {:.2} < {:.2} < {:.2}, census [2, 2, 1]",
        scores[0], scores[1], scores[2], scores[3]
    ))
}

/// Rewrites the metadata JSON of an encoded dump.
fn with_metadata(bytes: &[u8], edit: impl FnOnce(&mut serde_json::Value)) -> Vec<u8> {
    let meta_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let mut meta: serde_json::Value = serde_json::from_slice(&bytes[16..16 + meta_len]).unwrap();
    edit(&mut meta);
    let text = serde_json::to_vec(&meta).unwrap();
    let mut out = bytes[..8].to_vec();
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(&text);
    out.extend_from_slice(&bytes[16 + meta_len..]);
    out
}

fn format_checks() -> Outcome {
    let mut rng = common::rng(0xd9a);
    for case in 0..1000 {
        let dump = common::random_dump(&mut rng, 4, 5, 9);
        let bytes = dumpio::encode_dump(&dump).map_err(err)?;
        let back = dumpio::decode_dump(&bytes).map_err(|e| format!("case {case}: {e}"))?;
        check(dumpio::encode_dump(&back).map_err(err)? == bytes, || format!("case {case}: re-encode differs"))?;
        let bits = |d: &dumpio::ActivationDump| -> Vec<u32> {
            d.layers()
                .iter()
                .flat_map(|l| l.high.data().iter().chain(l.low.data()).map(|v| v.to_bits()).collect::<Vec<_>>())
                .collect()
        };
        check(bits(&back) == bits(&dump) && back.metadata() == dump.metadata(), || {
            format!("case {case}: decoded dump differs")
        })?;
    }

    let spec = PlantSpec::random(vec![2, 5], 4, 1, 1, 4.0, 1.0, 3, 1).map_err(err)?;
    let good = dumpio::encode_dump(&toymodel::plant(&spec).map_err(err)?).map_err(err)?;

    let mut cases: Vec<(&str, Vec<u8>, fn(&Error) -> bool)> = Vec::new();
    let mut bad_magic = good.clone();
    bad_magic[0] = b'X';
    cases.push(("bad magic", bad_magic, |e| matches!(e, Error::BadMagic { .. })));
    let mut bad_version = good.clone();
    bad_version[4..8].copy_from_slice(&2u32.to_le_bytes());
    cases.push(("unsupported version", bad_version, |e| matches!(e, Error::UnsupportedVersion(2))));
    cases.push(("short header", good[..10].to_vec(), |e| matches!(e, Error::TruncatedHeader { .. })));
    cases.push(("truncated tensors", good[..good.len() - 4].to_vec(), |e| {
        matches!(e, Error::OffsetOutOfBounds { .. })
    }));
    let mut long_meta = good.clone();
    long_meta[8..16].copy_from_slice(&(good.len() as u64).to_le_bytes());
    cases.push(("metadata past end", long_meta, |e| matches!(e, Error::OffsetOutOfBounds { .. })));
    let far = with_metadata(&good, |m| m["layer_entries"][1]["byte_offset_low"] = (1u64 << 40).into());
    cases.push(("offset past end", far, |e| matches!(e, Error::OffsetOutOfBounds { .. })));
    let overlap = with_metadata(&good, |m| m["layer_entries"][0]["byte_offset_low"] = 8.into());
    cases.push(("overlapping regions", overlap, |e| matches!(e, Error::OverlappingRegions { .. })));
    let mut garbage = good.clone();
    garbage[16] = b'#';
    cases.push(("malformed metadata", garbage, |e| matches!(e, Error::Metadata(_))));
    let dtype = with_metadata(&good, |m| m["dtype"] = "f16".into());
    cases.push(("wrong dtype", dtype, |e| matches!(e, Error::Metadata(_))));
    // layer 5 low is the last region: 3 samples x 4 neurons; patch sample 1, neuron 2
    let mut nan = good.clone();
    let at = good.len() - 12 * 4 + (4 + 2) * 4;
    nan[at..at + 4].copy_from_slice(&f32::NAN.to_le_bytes());
    cases.push(("NaN value", nan, |e| {
        matches!(e, Error::NonFinite { layer: 5, direction: Direction::Low, sample: 1, neuron: 2, .. })
    }));

    for (name, bytes, expect) in &cases {
        match dumpio::decode_dump(bytes) {
            Ok(_) => return Err(format!("{name}: decoded without error")),
            Err(e) if expect(&e) => {}
            Err(e) => return Err(format!("{name}: wrong error {e}")),
        }
    }
    Ok(format!("1,000 round-trips bitwise; {} corruption classes rejected with their errors", cases.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome, Option<Duration>); 8] = [
        ("statistics oracle", statistics_oracle, Some(Duration::from_secs(5))),
        ("selection equivalence", selection_equivalence, Some(Duration::from_secs(5))),
        ("sparsity at scale", sparsity_at_scale, Some(Duration::from_secs(30))),
        ("planted recovery", planted_recovery, Some(Duration::from_secs(60))),
        ("intervention algebra", intervention_algebra, None),
        ("toy end-to-end", toy_end_to_end, None),
        ("pca", pca_checks, None),
        ("format", format_checks, None),
    ];
    let mut failed = 0;
    for (name, f, limit) in criteria {
        let start = Instant::now();
        let mut outcome = f();
        let elapsed = start.elapsed();
        if let (Ok(_), Some(limit)) = (&outcome, limit) {
            if elapsed > limit {
                outcome = Err(format!("took {elapsed:.2?}, limit {limit:?}"));
            }
        }
        match outcome {
            Ok(detail) => println!("PASS  {name:<22} {detail} ({elapsed:.2?})"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name:<22} {detail} ({elapsed:.2?})");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 8 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
