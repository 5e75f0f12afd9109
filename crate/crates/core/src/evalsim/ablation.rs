//! Unary-only against full CRF association on simulated scenes.

use std::fmt::Write as _;
use std::path::Path;

use super::metrics::{evaluate, MetricsReport};
use super::mot::{read_mot, rows_to_trackset, trackset_to_rows, write_atomic, write_mot, MotRole};
use super::scene::{count_crossings, generate_scene, SceneConfig};
use crate::association::{track, validate_links, validate_trackset, AssociationConfig, Mode, Providers};
use crate::error::Result;
use crate::par::{self, Execution};

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub seed: u64,
    pub crossings: usize,
    pub unary: MetricsReport,
    pub crf: MetricsReport,
}

impl AblationRow {
    pub fn strict_win(&self) -> bool {
        self.crf.mota > self.unary.mota
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationSummary {
    pub scenes: usize,
    pub mean_mota_unary: f64,
    pub mean_mota_crf: f64,
    pub mean_ids_unary: f64,
    pub mean_ids_crf: f64,
    /// Scenes where the CRF has strictly higher MOTA.
    pub strict_wins: usize,
}

impl AblationSummary {
    pub fn from_rows(rows: &[AblationRow]) -> Self {
        let n = rows.len().max(1) as f64;
        let mean = |f: &dyn Fn(&AblationRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
        AblationSummary {
            scenes: rows.len(),
            mean_mota_unary: mean(&|r| r.unary.mota),
            mean_mota_crf: mean(&|r| r.crf.mota),
            mean_ids_unary: mean(&|r| r.unary.ids as f64),
            mean_ids_crf: mean(&|r| r.crf.ids as f64),
            strict_wins: rows.iter().filter(|r| r.strict_win()).count(),
        }
    }

    pub fn ids_not_worse(&self) -> bool {
        self.mean_ids_crf <= self.mean_ids_unary
    }

    pub fn mota_not_worse(&self) -> bool {
        self.mean_mota_crf >= self.mean_mota_unary
    }

    /// Strict MOTA improvement on at least 60% of scenes.
    pub fn wins_enough(&self) -> bool {
        5 * self.strict_wins >= 3 * self.scenes
    }
}

/// Comparison table, one line per scene and a mean line.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:>6} {:>5} {:>9} {:>9} {:>7} {:>7} {:>6} {:>6}",
        "seed", "cross", "mota_u", "mota_crf", "ids_u", "ids_crf", "fp_u", "fp_crf"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:>6} {:>5} {:>9.4} {:>9.4} {:>7} {:>7} {:>6} {:>6}",
            r.seed, r.crossings, r.unary.mota, r.crf.mota, r.unary.ids, r.crf.ids, r.unary.fp, r.crf.fp
        );
    }
    let m = AblationSummary::from_rows(rows);
    let _ = writeln!(
        s,
        "{:>6} {:>5} {:>9.4} {:>9.4} {:>7.2} {:>7.2}   crf wins {}/{}",
        "mean", "", m.mean_mota_unary, m.mean_mota_crf, m.mean_ids_unary, m.mean_ids_crf, m.strict_wins, m.scenes
    );
    s
}

/// Tracks every scene in both modes. Link sets of every round and every
/// output track set are validated; with `out_dir`, results are written as
/// `<seed>_<mode>.txt` next to `<seed>_gt.txt`, read back and validated
/// again.
pub fn run_ablation(
    seeds: &[u64],
    scene: &SceneConfig,
    cfg: &AssociationConfig,
    providers: Providers<'_>,
    iou_threshold: f64,
    exec: Execution,
    out_dir: Option<&Path>,
) -> Result<Vec<AblationRow>> {
    par::map(exec, seeds, |&seed| -> Result<AblationRow> {
        let sc = generate_scene(&SceneConfig { seed, ..scene.clone() })?;
        if let Some(dir) = out_dir {
            let gt = write_mot(&trackset_to_rows(&sc.gt, MotRole::GroundTruth));
            write_atomic(&dir.join(format!("{seed}_gt.txt")), &gt)?;
        }
        let mut reports = Vec::with_capacity(2);
        for mode in [Mode::Unary, Mode::Crf] {
            let mode_cfg = AssociationConfig { mode, ..cfg.clone() };
            let out = track(sc.detections.clone(), &mode_cfg, providers, exec)?;
            for round in &out.rounds {
                validate_links(&round.nodes, &round.labels)?;
            }
            validate_trackset(&out.tracks)?;
            if let Some(dir) = out_dir {
                let path = dir.join(format!("{seed}_{mode}.txt"));
                write_atomic(&path, &write_mot(&trackset_to_rows(&out.tracks, MotRole::Results)))?;
                validate_trackset(&rows_to_trackset(
                    &read_mot(&path, MotRole::Results)?,
                    MotRole::Results,
                )?)?;
            }
            reports.push(evaluate(&sc.gt, &out.tracks, iou_threshold));
        }
        let crf = reports.pop().expect("two modes");
        let unary = reports.pop().expect("two modes");
        Ok(AblationRow {
            seed,
            crossings: count_crossings(&sc.gt),
            unary,
            crf,
        })
    })
    .into_iter()
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::potentials::{LogisticPairwise, LogisticUnary};

    fn report(mota: f64, ids: usize) -> MetricsReport {
        MetricsReport {
            mota,
            motp: 0.0,
            idf1: 0.0,
            mt: 0.0,
            ml: 0.0,
            fp: 0,
            fn_: 0,
            ids,
            fm: 0,
            gt_boxes: 0,
            result_boxes: 0,
            matches: 0,
            gt_tracks: 0,
        }
    }

    #[test]
    fn summary_counts_strict_wins() {
        let row = |seed, u, c, iu, ic| AblationRow {
            seed,
            crossings: 3,
            unary: report(u, iu),
            crf: report(c, ic),
        };
        let rows = vec![
            row(0, 0.5, 0.6, 2, 1),
            row(1, 0.7, 0.7, 1, 1),
            row(2, 0.8, 0.7, 0, 3),
            row(3, 0.4, 0.9, 3, 1),
            row(4, 0.6, 0.65, 2, 2),
        ];
        let s = AblationSummary::from_rows(&rows);
        assert_eq!(s.strict_wins, 3);
        assert!(s.wins_enough());
        assert!((s.mean_mota_crf - 0.71).abs() < 1e-12);
        assert!((s.mean_ids_unary - 1.6).abs() < 1e-12);
        assert!(s.ids_not_worse() && s.mota_not_worse());
        assert!(!AblationSummary::from_rows(&rows[1..3]).wins_enough());
        assert_eq!(ablation_table(&rows).lines().count(), 7);
    }

    #[test]
    fn small_scene_runs_in_both_modes() {
        let dir = tempfile::tempdir().unwrap();
        let scene = SceneConfig {
            n_targets: 3,
            n_frames: 40,
            crossings: 1,
            ..SceneConfig::default()
        };
        let (u, p) = (LogisticUnary::default(), LogisticPairwise::default());
        let providers = Providers {
            unary: &u,
            pairwise: &p,
        };
        let cfg = AssociationConfig::default();
        let rows = run_ablation(
            &[5],
            &scene,
            &cfg,
            providers,
            0.5,
            Execution::Parallel,
            Some(dir.path()),
        )
        .unwrap();
        assert_eq!(rows.len(), 1);
        assert!(rows[0].crossings >= 1);
        for name in ["5_gt.txt", "5_unary.txt", "5_crf.txt"] {
            assert!(dir.path().join(name).exists(), "{name}");
        }
        let again = run_ablation(&[5], &scene, &cfg, providers, 0.5, Execution::Sequential, None).unwrap();
        assert_eq!(rows, again);
    }
}
