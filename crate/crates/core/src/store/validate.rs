// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::bundle::{scan_bundle_dir, structural_findings, ActivationBundle, Finding};
use crate::error::ActKind;
use crate::numkit::norm;

/// Row-norm summary of one activation matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadStats {
    pub layer: usize,
    pub head: usize,
    pub kind: ActKind,
    pub rows: usize,
    pub min_norm: f64,
    pub mean_norm: f64,
    pub max_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub findings: Vec<Finding>,
    pub head_stats: Vec<HeadStats>,
    pub nan_count: usize,
    pub class_balance: Vec<usize>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.findings.is_empty()
    }

    pub fn has_structural(&self) -> bool {
        self.findings.iter().any(Finding::is_structural)
    }
}

/// Report on a loaded bundle: per-head norm statistics, non-finite count,
/// class balance and any findings.
pub fn validate_bundle(bundle: &ActivationBundle) -> ValidationReport {
    let manifest = bundle.manifest();
    let mut findings = structural_findings(manifest, bundle.class_map(), bundle.instance_map());
    let class_balance = manifest.class_balance();
    for (class, &n) in class_balance.iter().enumerate() {
        if n == 0 {
            findings.push(Finding::EmptyClass { class });
        }
    }

    let mut head_stats = Vec::new();
    let mut nan_count = 0;
    for id in bundle.head_ids() {
        for kind in [ActKind::Class, ActKind::Instance] {
            let m = match kind {
                ActKind::Class => bundle.class_acts(id),
                ActKind::Instance => bundle.instance_acts(id),
            }
            .expect("validated bundle has every head");
            nan_count += m.data().iter().filter(|x| !x.is_finite()).count();
            let norms: Vec<f64> = m.iter_rows().map(norm).collect();
            for (row, &n) in norms.iter().enumerate() {
                if n == 0.0 {
                    findings.push(match kind {
                        ActKind::Class => Finding::ZeroNormClassToken {
                            layer: id.layer,
                            head: id.head,
                            class: row,
                        },
                        ActKind::Instance => Finding::ZeroNormInstance {
                            layer: id.layer,
                            head: id.head,
                            instance: row,
                        },
                    });
                }
            }
            let (min_norm, max_norm) = norms
                .iter()
                .fold((f64::INFINITY, 0.0f64), |(lo, hi), &n| (lo.min(n), hi.max(n)));
            head_stats.push(HeadStats {
                layer: id.layer,
                head: id.head,
                kind,
                rows: m.rows(),
                min_norm: if norms.is_empty() { 0.0 } else { min_norm },
                mean_norm: norms.iter().sum::<f64>() / norms.len().max(1) as f64,
                max_norm,
            });
        }
    }
    ValidationReport {
        findings,
        head_stats,
        nan_count,
        class_balance,
    }
}

/// Validates a bundle directory, collecting unloadable-file problems as
/// findings rather than failing.
pub fn validate_dir(dir: impl AsRef<Path>) -> ValidationReport {
    let (bundle, findings) = scan_bundle_dir(dir);
    match bundle {
        Some(b) => validate_bundle(&b),
        None => {
            let nan_count = findings
                .iter()
                .map(|f| match f {
                    Finding::NonFinite { count, .. } => *count,
                    Finding::CorruptFile { message, .. } if message.contains("non-finite") => 1,
                    _ => 0,
                })
                .sum();
            ValidationReport {
                findings,
                head_stats: Vec::new(),
                nan_count,
                class_balance: Vec::new(),
            }
        }
    }
}
