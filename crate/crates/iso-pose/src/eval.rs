//! Pose-estimation metrics: MPJPE, PCK@150mm, AUC, alignment protocols
//! (unscaled / globally scaled / Procrustes), per-part PCK breakdowns,
//! limb-ratio distribution reports, and tab-separated result tables.

use crate::geometry::{self, GeometryError, Pose3D, SkeletonTopology};
use crate::real::Real;
use thiserror::Error;

pub const PCK_THRESHOLD_MM: f64 = 150.0;

/// AUC averages PCK over this fixed grid: {5, 10, ..., 150} mm.
pub fn auc_thresholds() -> Vec<f64> {
    (1..=30).map(|i| 5.0 * i as f64).collect()
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("part group '{0}' is empty")]
    EmptyGroup(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    /// Raw root-relative comparison.
    Unscaled,
    /// Per-sample least-squares global rescale of the prediction.
    GlobalScale,
    /// Per-sample similarity (Procrustes) alignment of the prediction.
    Procrustes,
}

impl Protocol {
    pub fn tag(&self) -> &'static str {
        match self {
            Protocol::Unscaled => "US",
            Protocol::GlobalScale => "GS",
            Protocol::Procrustes => "PA",
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub mpjpe: f64,
    pub pck: f64,
    pub auc: f64,
    /// Procrustes-aligned MPJPE; present under the Procrustes protocol.
    pub pa_mpjpe: Option<f64>,
    pub per_part_pck: Vec<(String, f64)>,
    pub sample_count: usize,
}

fn check_pair<R: Real>(preds: &[Pose3D<R>], gts: &[Pose3D<R>]) -> Result<(), EvalError> {
    if preds.len() != gts.len() {
        return Err(EvalError::Shape(format!("{} predictions vs {} ground truths", preds.len(), gts.len())));
    }
    if preds.is_empty() {
        return Err(EvalError::Empty("no samples".into()));
    }
    for (i, (p, g)) in preds.iter().zip(gts).enumerate() {
        if p.len() != g.len() {
            return Err(EvalError::Shape(format!(
                "sample {}: {} joints vs {}",
                i,
                p.len(),
                g.len()
            )));
        }
    }
    Ok(())
}

/// Per-joint Euclidean errors for every sample, flattened sample-major.
fn joint_errors<R: Real>(preds: &[Pose3D<R>], gts: &[Pose3D<R>]) -> Vec<f64> {
    let mut errs = Vec::new();
    for (p, g) in preds.iter().zip(gts) {
        for (a, b) in p.joints.iter().zip(&g.joints) {
            let d = [
                a[0].to_f64() - b[0].to_f64(),
                a[1].to_f64() - b[1].to_f64(),
                a[2].to_f64() - b[2].to_f64(),
            ];
            errs.push((d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt());
        }
    }
    errs
}

/// Mean per-joint position error (mm) over joints and samples.
pub fn mpjpe<R: Real>(preds: &[Pose3D<R>], gts: &[Pose3D<R>]) -> Result<f64, EvalError> {
    check_pair(preds, gts)?;
    let errs = joint_errors(preds, gts);
    Ok(errs.iter().sum::<f64>() / errs.len() as f64)
}

fn pck_of_errors(errs: &[f64], threshold: f64) -> f64 {
    // boundary inclusive: an error exactly at the threshold counts
    let hits = errs.iter().filter(|&&e| e <= threshold).count();
    100.0 * hits as f64 / errs.len() as f64
}

/// Percentage of joints within `threshold` mm (inclusive).
pub fn pck_at<R: Real>(
    preds: &[Pose3D<R>],
    gts: &[Pose3D<R>],
    threshold: f64,
) -> Result<f64, EvalError> {
    check_pair(preds, gts)?;
    Ok(pck_of_errors(&joint_errors(preds, gts), threshold))
}

/// PCK at the standard 150 mm threshold.
pub fn pck<R: Real>(preds: &[Pose3D<R>], gts: &[Pose3D<R>]) -> Result<f64, EvalError> {
    pck_at(preds, gts, PCK_THRESHOLD_MM)
}

/// Mean PCK over the fixed threshold grid {5..150 step 5} mm.
pub fn auc<R: Real>(preds: &[Pose3D<R>], gts: &[Pose3D<R>]) -> Result<f64, EvalError> {
    check_pair(preds, gts)?;
    let errs = joint_errors(preds, gts);
    let grid = auc_thresholds();
    Ok(grid.iter().map(|&t| pck_of_errors(&errs, t)).sum::<f64>() / grid.len() as f64)
}

/// Apply the protocol's per-sample alignment to each prediction.
pub fn align_protocol<R: Real>(
    preds: &[Pose3D<R>],
    gts: &[Pose3D<R>],
    protocol: Protocol,
) -> Result<Vec<Pose3D<R>>, EvalError> {
    check_pair(preds, gts)?;
    preds
        .iter()
        .zip(gts)
        .map(|(p, g)| {
            Ok(match protocol {
                Protocol::Unscaled => p.clone(),
                Protocol::GlobalScale => geometry::optimal_global_scale(p, g)?,
                Protocol::Procrustes => geometry::procrustes_align(p, g)?,
            })
        })
        .collect()
}

/// PCK per named part group; errors on an empty group.
pub fn per_part_pck<R: Real>(
    preds: &[Pose3D<R>],
    gts: &[Pose3D<R>],
    topo: &SkeletonTopology,
) -> Result<Vec<(String, f64)>, EvalError> {
    check_pair(preds, gts)?;
    let j = preds[0].len();
    let errs = joint_errors(preds, gts);
    let mut table = Vec::new();
    for (name, joints) in topo.part_groups() {
        if joints.is_empty() {
            return Err(EvalError::EmptyGroup(name.clone()));
        }
        let mut part_errs = Vec::with_capacity(preds.len() * joints.len());
        for s in 0..preds.len() {
            for &ji in joints {
                part_errs.push(errs[s * j + ji]);
            }
        }
        table.push((name.clone(), pck_of_errors(&part_errs, PCK_THRESHOLD_MM)));
    }
    Ok(table)
}

/// Full metric suite under one alignment protocol.
pub fn evaluate_protocol<R: Real>(
    preds: &[Pose3D<R>],
    gts: &[Pose3D<R>],
    topo: &SkeletonTopology,
    protocol: Protocol,
) -> Result<EvalReport, EvalError> {
    let aligned = align_protocol(preds, gts, protocol)?;
    let m = mpjpe(&aligned, gts)?;
    let report = EvalReport {
        protocol,
        mpjpe: m,
        pck: pck(&aligned, gts)?,
        auc: auc(&aligned, gts)?,
        pa_mpjpe: if protocol == Protocol::Procrustes { Some(m) } else { None },
        per_part_pck: per_part_pck(&aligned, gts, topo)?,
        sample_count: preds.len(),
    };
    debug_assert!(report.auc <= report.pck + 1e-9);
    Ok(report)
}

/// Histogram plus summary statistics of one limb-length ratio.
#[derive(Debug, Clone, PartialEq)]
pub struct RatioHistogram {
    pub name: String,
    pub lo: f64,
    pub hi: f64,
    /// Per-bin counts; values outside [lo, hi) clamp to the end bins.
    pub counts: Vec<usize>,
    pub mean: f64,
    pub std: f64,
}

impl RatioHistogram {
    pub fn bin_of(&self, v: f64) -> usize {
        let bins = self.counts.len();
        let t = (v - self.lo) / (self.hi - self.lo);
        ((t * bins as f64).floor() as isize).clamp(0, bins as isize - 1) as usize
    }
}

/// Limb-ratio distributions over a pose set: one histogram per ratio
/// (arm_L, arm_R, leg_L, leg_R, torso) over a fixed [lo, hi) range.
pub fn limb_ratio_report<R: Real>(
    poses: &[Pose3D<R>],
    topo: &SkeletonTopology,
    bins: usize,
    range: (f64, f64),
) -> Result<Vec<RatioHistogram>, EvalError> {
    if poses.is_empty() {
        return Err(EvalError::Empty("no poses".into()));
    }
    if bins == 0 || !(range.0 < range.1) {
        return Err(EvalError::Shape(format!("bad histogram shape: {} bins over [{}, {})", bins, range.0, range.1)));
    }
    let mut values: Vec<Vec<f64>> = vec![Vec::with_capacity(poses.len()); 5];
    for pose in poses {
        let r = geometry::limb_ratios(pose, topo)?;
        for (k, v) in r.as_array().iter().enumerate() {
            values[k].push(v.to_f64());
        }
    }
    let names = geometry::LimbRatios::<R>::NAMES;
    Ok(values
        .into_iter()
        .zip(names)
        .map(|(vs, name)| {
            let n = vs.len() as f64;
            let mean = vs.iter().sum::<f64>() / n;
            let std = if vs.len() > 1 {
                (vs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            let mut h = RatioHistogram {
                name: name.to_string(),
                lo: range.0,
                hi: range.1,
                counts: vec![0; bins],
                mean,
                std,
            };
            for v in &vs {
                let b = h.bin_of(*v);
                h.counts[b] += 1;
            }
            h
        })
        .collect())
}

// ---- tab-separated report tables ----

/// One labelled result row of a comparison table.
#[derive(Debug, Clone)]
pub struct ResultRow {
    pub label: String,
    pub pck: f64,
    pub auc: f64,
    pub mpjpe: f64,
    /// Wall-clock seconds for the run, when timing is part of the table.
    pub time_s: Option<f64>,
}

/// Render rows as a TSV table; adds a Time column when any row has one.
pub fn render_result_table(rows: &[ResultRow]) -> String {
    let with_time = rows.iter().any(|r| r.time_s.is_some());
    let mut out = String::from(if with_time {
        "Method\tPCK\tAUC\tMPJPE\tTime[s]\n"
    } else {
        "Method\tPCK\tAUC\tMPJPE\n"
    });
    for r in rows {
        out.push_str(&format!("{}\t{:.2}\t{:.2}\t{:.2}", r.label, r.pck, r.auc, r.mpjpe));
        if with_time {
            out.push_str(&format!("\t{:.2}", r.time_s.unwrap_or(f64::NAN)));
        }
        out.push('\n');
    }
    out
}

/// Render a full report (metrics plus per-part PCK) as TSV.
pub fn render_report(report: &EvalReport) -> String {
    let mut out = format!(
        "protocol\t{}\nsamples\t{}\nMPJPE\t{:.3}\nPCK\t{:.3}\nAUC\t{:.3}\n",
        report.protocol.tag(),
        report.sample_count,
        report.mpjpe,
        report.pck,
        report.auc
    );
    if let Some(pa) = report.pa_mpjpe {
        out.push_str(&format!("PA-MPJPE\t{:.3}\n", pa));
    }
    for (name, v) in &report.per_part_pck {
        out.push_str(&format!("PCK[{}]\t{:.3}\n", name, v));
    }
    out
}

/// Render limb-ratio histograms as TSV: one row per bin, one column per
/// ratio, with mean/std summary rows.
pub fn render_ratio_report(hists: &[RatioHistogram]) -> String {
    if hists.is_empty() {
        return String::new();
    }
    let bins = hists[0].counts.len();
    let mut out = String::from("bin_lo");
    for h in hists {
        out.push_str(&format!("\t{}", h.name));
    }
    out.push('\n');
    for b in 0..bins {
        let lo = hists[0].lo + (hists[0].hi - hists[0].lo) * b as f64 / bins as f64;
        out.push_str(&format!("{:.4}", lo));
        for h in hists {
            out.push_str(&format!("\t{}", h.counts[b]));
        }
        out.push('\n');
    }
    for (tag, f) in [("mean", true), ("std", false)] {
        out.push_str(tag);
        for h in hists {
            out.push_str(&format!("\t{:.4}", if f { h.mean } else { h.std }));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn topo() -> SkeletonTopology {
        SkeletonTopology::default_16()
    }

    fn sample_poses(n: usize, seed: u64) -> Vec<Pose3D<f64>> {
        let t = topo();
        let cfg = synthdata::desk_target(&t, n, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| synthdata::sample_pose3d(&cfg, &t, &mut rng)).collect()
    }

    fn offset(pose: &Pose3D<f64>, joint: usize, d: [f64; 3]) -> Pose3D<f64> {
        let mut p = pose.clone();
        for k in 0..3 {
            p.joints[joint][k] += d[k];
        }
        p
    }

    #[test]
    fn mpjpe_hand_cases() {
        let gt = vec![Pose3D::<f64> { joints: vec![[0.0, 0.0, 0.0]] }];
        assert_eq!(mpjpe(&gt, &gt).unwrap(), 0.0);
        let pred = vec![Pose3D { joints: vec![[3.0, 4.0, 0.0]] }];
        assert!((mpjpe(&pred, &gt).unwrap() - 5.0).abs() < 1e-12);
        let gt2 = vec![Pose3D::<f64> { joints: vec![[0.0; 3], [0.0; 3]] }];
        let pred2 = vec![Pose3D { joints: vec![[10.0, 0.0, 0.0], [0.0, 30.0, 0.0]] }];
        assert!((mpjpe(&pred2, &gt2).unwrap() - 20.0).abs() < 1e-12);
    }

    #[test]
    fn pck_hand_cases_and_inclusive_boundary() {
        let gt = sample_poses(1, 1);
        assert_eq!(pck(&gt, &gt).unwrap(), 100.0);
        let pred = vec![offset(&gt[0], 5, [200.0, 0.0, 0.0])];
        assert!((pck(&pred, &gt).unwrap() - 93.75).abs() < 1e-12);
        // exactly 150mm counts as correct
        let pred = vec![offset(&gt[0], 5, [150.0, 0.0, 0.0])];
        assert_eq!(pck(&pred, &gt).unwrap(), 100.0);
        let pred = vec![offset(&gt[0], 5, [150.0 + 1e-9, 0.0, 0.0])];
        assert!(pck(&pred, &gt).unwrap() < 100.0);
    }

    #[test]
    fn auc_hand_cases() {
        // zero gt keeps the offsets exact in floating point
        let gt = vec![Pose3D::<f64> { joints: vec![[0.0; 3]; 16] }];
        assert_eq!(auc(&gt, &gt).unwrap(), 100.0);
        // all joints exactly 100mm off: thresholds 100..150 pass (11 of 30)
        let pred = vec![Pose3D {
            joints: gt[0].joints.iter().map(|j| [j[0] + 100.0, j[1], j[2]]).collect(),
        }];
        let expect = 100.0 * 11.0 / 30.0;
        assert!((auc(&pred, &gt).unwrap() - expect).abs() < 1e-9, "{}", auc(&pred, &gt).unwrap());
        let pred = vec![Pose3D {
            joints: gt[0].joints.iter().map(|j| [j[0] + 400.0, j[1], j[2]]).collect(),
        }];
        assert_eq!(auc(&pred, &gt).unwrap(), 0.0);
    }

    #[test]
    fn auc_never_exceeds_pck() {
        let gt = sample_poses(20, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let preds: Vec<Pose3D<f64>> = gt
            .iter()
            .map(|p| Pose3D {
                joints: p
                    .joints
                    .iter()
                    .map(|j| {
                        [
                            j[0] + 120.0 * f64::sample_normal(&mut rng),
                            j[1] + 120.0 * f64::sample_normal(&mut rng),
                            j[2] + 120.0 * f64::sample_normal(&mut rng),
                        ]
                    })
                    .collect(),
            })
            .collect();
        assert!(auc(&preds, &gt).unwrap() <= pck(&preds, &gt).unwrap());
    }

    #[test]
    fn protocols_recover_scale_and_rotation() {
        let gt = sample_poses(5, 4);
        let scaled: Vec<Pose3D<f64>> = gt
            .iter()
            .map(|p| Pose3D { joints: p.joints.iter().map(|j| [0.7 * j[0], 0.7 * j[1], 0.7 * j[2]]).collect() })
            .collect();
        let t = topo();
        let us = evaluate_protocol(&scaled, &gt, &t, Protocol::Unscaled).unwrap();
        let gs = evaluate_protocol(&scaled, &gt, &t, Protocol::GlobalScale).unwrap();
        let pa = evaluate_protocol(&scaled, &gt, &t, Protocol::Procrustes).unwrap();
        assert!(us.mpjpe > 10.0);
        assert!(gs.mpjpe < 1e-9);
        assert!(pa.mpjpe < 1e-6);
        assert!(pa.pa_mpjpe.is_some() && gs.pa_mpjpe.is_none());
        // pure rotation: only Procrustes removes it
        let rot = crate::geometry::ViewRotation { azimuth: 0.9f64, elevation: 0.2 };
        let rotated: Vec<Pose3D<f64>> = gt.iter().map(|p| crate::geometry::rotate(p, &rot)).collect();
        let us = evaluate_protocol(&rotated, &gt, &t, Protocol::Unscaled).unwrap();
        let gs = evaluate_protocol(&rotated, &gt, &t, Protocol::GlobalScale).unwrap();
        let pa = evaluate_protocol(&rotated, &gt, &t, Protocol::Procrustes).unwrap();
        assert!(us.mpjpe > 10.0 && gs.mpjpe > 10.0);
        assert!(pa.mpjpe < 1e-6);
    }

    #[test]
    fn protocol_mpjpe_ordering() {
        let gt = sample_poses(30, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let preds: Vec<Pose3D<f64>> = gt
            .iter()
            .map(|p| Pose3D {
                joints: p
                    .joints
                    .iter()
                    .map(|j| {
                        [
                            1.2 * j[0] + 80.0 * f64::sample_normal(&mut rng),
                            1.2 * j[1] + 80.0 * f64::sample_normal(&mut rng),
                            1.2 * j[2] + 80.0 * f64::sample_normal(&mut rng),
                        ]
                    })
                    .collect(),
            })
            .collect();
        let t = topo();
        // ordering must hold per sample: each protocol minimizes over a
        // superset of the previous protocol's transforms
        for i in 0..gt.len() {
            let p = &preds[i..i + 1];
            let g = &gt[i..i + 1];
            let us = evaluate_protocol(p, g, &t, Protocol::Unscaled).unwrap().mpjpe;
            let gs = evaluate_protocol(p, g, &t, Protocol::GlobalScale).unwrap().mpjpe;
            let pa = evaluate_protocol(p, g, &t, Protocol::Procrustes).unwrap().mpjpe;
            assert!(gs <= us + 1e-9, "sample {}: GS {} > US {}", i, gs, us);
            assert!(pa <= gs + 1e-6, "sample {}: PA {} > GS {}", i, pa, gs);
        }
    }

    #[test]
    fn per_part_pck_isolation_and_partition() {
        let t = topo();
        let gt = sample_poses(4, 7);
        let table = per_part_pck(&gt, &gt, &t).unwrap();
        assert_eq!(table.len(), t.part_groups().len());
        assert!(table.iter().all(|(_, v)| *v == 100.0));
        // break only the wrist joints
        let wrists: Vec<usize> = t
            .part_groups()
            .iter()
            .find(|(n, _)| n.to_lowercase().contains("wrist"))
            .map(|(_, js)| js.clone())
            .unwrap();
        let preds: Vec<Pose3D<f64>> = gt
            .iter()
            .map(|p| {
                let mut q = p.clone();
                for &w in &wrists {
                    q.joints[w][0] += 500.0;
                }
                q
            })
            .collect();
        let table = per_part_pck(&preds, &gt, &t).unwrap();
        for (name, v) in &table {
            if name.to_lowercase().contains("wrist") {
                assert_eq!(*v, 0.0);
            } else {
                assert_eq!(*v, 100.0, "part {}", name);
            }
        }
        // weighted mean of part PCKs over covered joints equals overall PCK
        let mut covered: Vec<usize> = t.part_groups().iter().flat_map(|(_, js)| js.clone()).collect();
        covered.sort_unstable();
        covered.dedup();
        let weighted: f64 = table
            .iter()
            .zip(t.part_groups())
            .map(|((_, v), (_, js))| v * js.len() as f64)
            .sum::<f64>()
            / t.part_groups().iter().map(|(_, js)| js.len() as f64).sum::<f64>();
        let restricted: Vec<Pose3D<f64>> = preds
            .iter()
            .map(|p| Pose3D { joints: covered.iter().map(|&j| p.joints[j]).collect() })
            .collect();
        let restricted_gt: Vec<Pose3D<f64>> = gt
            .iter()
            .map(|p| Pose3D { joints: covered.iter().map(|&j| p.joints[j]).collect() })
            .collect();
        // identity holds when the groups partition the covered joints
        let total_group_joints: usize = t.part_groups().iter().map(|(_, js)| js.len()).sum();
        if total_group_joints == covered.len() {
            let overall = pck(&restricted, &restricted_gt).unwrap();
            assert!((weighted - overall).abs() < 1e-9);
        }
    }

    #[test]
    fn limb_ratio_report_matches_generator() {
        let t = topo();
        let poses = sample_poses(50, 8);
        let hists = limb_ratio_report(&poses, &t, 40, (0.525, 2.525)).unwrap();
        assert_eq!(hists.len(), 5);
        // generator uses exact ratios: all mass lands in one bin per ratio
        for (h, expect) in hists.iter().zip([1.3, 1.3, 1.3, 1.3, 1.0]) {
            let target = h.bin_of(expect);
            assert_eq!(h.counts[target], 50, "{}", h.name);
            assert!((h.mean - expect).abs() < 1e-5);
            assert!(h.std < 1e-5);
        }
        // left/right coincide for the symmetric generator
        assert_eq!(hists[0].counts, hists[1].counts);
        assert_eq!(hists[2].counts, hists[3].counts);
        // flipped poses swap left and right histograms
        let flipped: Vec<Pose3D<f64>> = poses.iter().map(|p| geometry::hflip3d(p, &t)).collect();
        let fh = limb_ratio_report(&flipped, &t, 40, (0.525, 2.525)).unwrap();
        assert_eq!(fh[0].counts, hists[1].counts);
        assert_eq!(fh[1].counts, hists[0].counts);
        assert_eq!(fh[2].counts, hists[3].counts);
        assert_eq!(fh[3].counts, hists[2].counts);
    }

    #[test]
    fn shape_and_empty_errors() {
        let a = sample_poses(2, 1);
        let b = sample_poses(3, 1);
        assert!(matches!(mpjpe(&a, &b), Err(EvalError::Shape(_))));
        let none: Vec<Pose3D<f64>> = Vec::new();
        assert!(matches!(mpjpe(&none, &none), Err(EvalError::Empty(_))));
        let short = vec![Pose3D::<f64> { joints: vec![[0.0; 3]] }, Pose3D { joints: vec![[0.0; 3]] }];
        assert!(matches!(pck(&a, &short), Err(EvalError::Shape(_))));
    }

    #[test]
    fn table_rendering() {
        let rows = vec![
            ResultRow { label: "Baseline".into(), pck: 81.3, auc: 45.2, mpjpe: 125.1, time_s: None },
            ResultRow { label: "Online-Cyc".into(), pck: 90.0, auc: 52.0, mpjpe: 98.7, time_s: None },
        ];
        let tsv = render_result_table(&rows);
        let lines: Vec<&str> = tsv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "Method\tPCK\tAUC\tMPJPE");
        assert!(lines[1].starts_with("Baseline\t81.30\t45.20\t125.10"));
        let rows_t = vec![ResultRow { label: "A".into(), pck: 1.0, auc: 1.0, mpjpe: 1.0, time_s: Some(2.5) }];
        assert!(render_result_table(&rows_t).lines().next().unwrap().ends_with("Time[s]"));
        let gt = sample_poses(3, 2);
        let rep = evaluate_protocol(&gt, &gt, &topo(), Protocol::Procrustes).unwrap();
        let text = render_report(&rep);
        assert!(text.contains("protocol\tPA") && text.contains("PA-MPJPE"));
        let hists = limb_ratio_report(&gt, &topo(), 10, (0.5, 2.5)).unwrap();
        let rr = render_ratio_report(&hists);
        assert_eq!(rr.lines().count(), 1 + 10 + 2);
    }
}
