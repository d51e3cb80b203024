// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::actbin::{read_actbin, write_actbin};
use super::manifest::Manifest;
use crate::error::{ActKind, Error, Result};
use crate::numkit::Matrix;

pub const MANIFEST_FILE: &str = "manifest.json";

/// A `(layer, head)` coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HeadId {
    pub layer: usize,
    pub head: usize,
}

impl HeadId {
    pub fn new(layer: usize, head: usize) -> Self {
        Self { layer, head }
    }
}

impl fmt::Display for HeadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}H{}", self.layer, self.head)
    }
}

/// `layer{L}_head{H}_{class|inst}.actbin`
pub fn head_file_name(id: HeadId, kind: ActKind) -> String {
    format!("layer{}_head{}_{}.actbin", id.layer, id.head, kind.infix())
}

/// Every `(layer, head)` a manifest promises, layer-major.
pub fn expected_heads(manifest: &Manifest) -> Vec<HeadId> {
    (0..manifest.layers)
        .flat_map(|l| (0..manifest.heads).map(move |h| HeadId::new(l, h)))
        .collect()
}

/// A problem found while checking a bundle.
///
/// Structural findings make a bundle unloadable; the rest are reported by
/// `validate` but do not block loading.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "finding", rename_all = "snake_case")]
pub enum Finding {
    ManifestUnreadable { message: String },
    ClassTokenCount { classes: usize, prompts: usize },
    NoClasses,
    LabelOutOfRange { instance: usize, label: usize, classes: usize },
    MissingFile { layer: usize, head: usize, kind: ActKind, path: PathBuf },
    CorruptFile { layer: usize, head: usize, kind: ActKind, message: String },
    UnexpectedHead { layer: usize, head: usize },
    ShapeMismatch {
        layer: usize,
        head: usize,
        kind: ActKind,
        expected_rows: usize,
        expected_cols: usize,
        rows: usize,
        cols: usize,
    },
    NonFinite { layer: usize, head: usize, kind: ActKind, count: usize },
    EmptyClass { class: usize },
    ZeroNormClassToken { layer: usize, head: usize, class: usize },
    ZeroNormInstance { layer: usize, head: usize, instance: usize },
}

impl Finding {
    pub fn is_structural(&self) -> bool {
        !matches!(
            self,
            Finding::EmptyClass { .. }
                | Finding::ZeroNormClassToken { .. }
                | Finding::ZeroNormInstance { .. }
        )
    }

    fn into_error(self) -> Error {
        match self {
            Finding::MissingFile {
                layer,
                head,
                kind,
                path,
            } => Error::MissingFile {
                layer,
                head,
                kind,
                path,
            },
            Finding::LabelOutOfRange {
                instance,
                label,
                classes,
            } => Error::LabelOutOfRange {
                instance,
                label,
                classes,
            },
            Finding::EmptyClass { class } => Error::EmptyClass { class },
            Finding::NonFinite { .. } => Error::NonFinite { index: 0 },
            Finding::ManifestUnreadable { message } => Error::InvalidArgument(message),
            other => Error::ShapeMismatch(other.to_string()),
        }
    }
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Finding::ManifestUnreadable { message } => write!(f, "manifest unreadable: {message}"),
            Finding::ClassTokenCount { classes, prompts } => write!(
                f,
                "{classes} classes but {prompts} class-token prompts"
            ),
            Finding::NoClasses => write!(f, "manifest lists no classes"),
            Finding::LabelOutOfRange {
                instance,
                label,
                classes,
            } => write!(
                f,
                "instance {instance} has class index {label} (only {classes} classes)"
            ),
            Finding::MissingFile {
                layer, head, kind, ..
            } => write!(f, "missing {kind} file for layer {layer}, head {head}"),
            Finding::CorruptFile {
                layer,
                head,
                kind,
                message,
            } => write!(f, "corrupt {kind} file for layer {layer}, head {head}: {message}"),
            Finding::UnexpectedHead { layer, head } => {
                write!(f, "activations for layer {layer}, head {head} outside the manifest")
            }
            Finding::ShapeMismatch {
                layer,
                head,
                kind,
                expected_rows,
                expected_cols,
                rows,
                cols,
            } => write!(
                f,
                "{kind} matrix for layer {layer}, head {head} is {rows}x{cols}, expected {expected_rows}x{expected_cols}"
            ),
            Finding::NonFinite {
                layer,
                head,
                kind,
                count,
            } => write!(f, "{count} non-finite values in {kind} file for layer {layer}, head {head}"),
            Finding::EmptyClass { class } => write!(f, "class {class} has no instances"),
            Finding::ZeroNormClassToken { layer, head, class } => write!(
                f,
                "zero-norm class token for class {class} at layer {layer}, head {head}"
            ),
            Finding::ZeroNormInstance {
                layer,
                head,
                instance,
            } => write!(
                f,
                "zero-norm instance {instance} at layer {layer}, head {head}"
            ),
        }
    }
}

/// Manifest-only structural checks.
pub fn manifest_findings(manifest: &Manifest) -> Vec<Finding> {
    let mut out = Vec::new();
    if manifest.classes.is_empty() {
        out.push(Finding::NoClasses);
    }
    if manifest.class_token_prompts.len() != manifest.classes.len() {
        out.push(Finding::ClassTokenCount {
            classes: manifest.classes.len(),
            prompts: manifest.class_token_prompts.len(),
        });
    }
    for (instance, p) in manifest.instance_prompts.iter().enumerate() {
        if p.class_index >= manifest.classes.len() {
            out.push(Finding::LabelOutOfRange {
                instance,
                label: p.class_index,
                classes: manifest.classes.len(),
            });
        }
    }
    out
}

/// Structural checks of a manifest against a set of per-head matrices.
pub fn structural_findings(
    manifest: &Manifest,
    class_acts: &BTreeMap<HeadId, Matrix>,
    instance_acts: &BTreeMap<HeadId, Matrix>,
) -> Vec<Finding> {
    let mut out = manifest_findings(manifest);
    let expected = expected_heads(manifest);
    let k = manifest.n_classes();
    let n = manifest.n_instances();
    for &id in &expected {
        for (kind, map, rows) in [
            (ActKind::Class, class_acts, k),
            (ActKind::Instance, instance_acts, n),
        ] {
            match map.get(&id) {
                None => out.push(Finding::MissingFile {
                    layer: id.layer,
                    head: id.head,
                    kind,
                    path: PathBuf::from(head_file_name(id, kind)),
                }),
                Some(m) if m.shape() != (rows, manifest.head_dim) => {
                    out.push(Finding::ShapeMismatch {
                        layer: id.layer,
                        head: id.head,
                        kind,
                        expected_rows: rows,
                        expected_cols: manifest.head_dim,
                        rows: m.rows(),
                        cols: m.cols(),
                    })
                }
                Some(m) if !m.is_finite() => out.push(Finding::NonFinite {
                    layer: id.layer,
                    head: id.head,
                    kind,
                    count: m.data().iter().filter(|x| !x.is_finite()).count(),
                }),
                Some(_) => {}
            }
        }
    }
    for id in class_acts.keys().chain(instance_acts.keys()) {
        if id.layer >= manifest.layers || id.head >= manifest.heads {
            let f = Finding::UnexpectedHead {
                layer: id.layer,
                head: id.head,
            };
            if !out.contains(&f) {
                out.push(f);
            }
        }
    }
    out
}

/// Per-head class-token and instance activations plus their manifest.
///
/// Construction checks every structural invariant, so a value of this type
/// always has a `K × head_dim` class matrix and an `N × head_dim` instance
/// matrix for every `(layer, head)` the manifest declares.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationBundle {
    manifest: Manifest,
    class_acts: BTreeMap<HeadId, Matrix>,
    instance_acts: BTreeMap<HeadId, Matrix>,
}

impl ActivationBundle {
    pub fn new(
        manifest: Manifest,
        class_acts: BTreeMap<HeadId, Matrix>,
        instance_acts: BTreeMap<HeadId, Matrix>,
    ) -> Result<Self> {
        if let Some(f) = structural_findings(&manifest, &class_acts, &instance_acts)
            .into_iter()
            .next()
        {
            return Err(f.into_error());
        }
        Ok(Self {
            manifest,
            class_acts,
            instance_acts,
        })
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn head_ids(&self) -> Vec<HeadId> {
        expected_heads(&self.manifest)
    }

    pub fn n_classes(&self) -> usize {
        self.manifest.n_classes()
    }

    pub fn n_instances(&self) -> usize {
        self.manifest.n_instances()
    }

    pub fn head_dim(&self) -> usize {
        self.manifest.head_dim
    }

    pub fn labels(&self) -> Vec<usize> {
        self.manifest.labels()
    }

    fn lookup<'a>(map: &'a BTreeMap<HeadId, Matrix>, id: HeadId) -> Result<&'a Matrix> {
        map.get(&id).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "no activations for layer {}, head {}",
                id.layer, id.head
            ))
        })
    }

    pub fn class_acts(&self, id: HeadId) -> Result<&Matrix> {
        Self::lookup(&self.class_acts, id)
    }

    pub fn instance_acts(&self, id: HeadId) -> Result<&Matrix> {
        Self::lookup(&self.instance_acts, id)
    }

    pub fn class_map(&self) -> &BTreeMap<HeadId, Matrix> {
        &self.class_acts
    }

    pub fn instance_map(&self) -> &BTreeMap<HeadId, Matrix> {
        &self.instance_acts
    }

    /// Same activations with new instance labels (used by permutation nulls).
    pub fn with_labels(&self, labels: &[usize]) -> Result<Self> {
        if labels.len() != self.n_instances() {
            return Err(Error::DimensionMismatch(format!(
                "{} labels for {} instances",
                labels.len(),
                self.n_instances()
            )));
        }
        let mut manifest = self.manifest.clone();
        for (p, &y) in manifest.instance_prompts.iter_mut().zip(labels) {
            p.class_index = y;
        }
        Self::new(manifest, self.class_acts.clone(), self.instance_acts.clone())
    }

    /// Applies `f` to every class and instance matrix.
    pub fn map_acts(&self, mut f: impl FnMut(HeadId, ActKind, &Matrix) -> Matrix) -> Result<Self> {
        let class_acts = self
            .class_acts
            .iter()
            .map(|(&id, m)| (id, f(id, ActKind::Class, m)))
            .collect();
        let instance_acts = self
            .instance_acts
            .iter()
            .map(|(&id, m)| (id, f(id, ActKind::Instance, m)))
            .collect();
        Self::new(self.manifest.clone(), class_acts, instance_acts)
    }

    pub fn into_parts(
        self,
    ) -> (
        Manifest,
        BTreeMap<HeadId, Matrix>,
        BTreeMap<HeadId, Matrix>,
    ) {
        (self.manifest, self.class_acts, self.instance_acts)
    }
}

pub fn write_bundle(bundle: &ActivationBundle, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    bundle.manifest.write(dir.join(MANIFEST_FILE))?;
    for id in bundle.head_ids() {
        write_actbin(&bundle.class_acts[&id], dir.join(head_file_name(id, ActKind::Class)))?;
        write_actbin(
            &bundle.instance_acts[&id],
            dir.join(head_file_name(id, ActKind::Instance)),
        )?;
    }
    Ok(())
}

type HeadRead = (HeadId, ActKind, PathBuf, Result<Matrix>);

fn read_head_files(dir: &Path, manifest: &Manifest) -> Vec<HeadRead> {
    let jobs: Vec<(HeadId, ActKind)> = expected_heads(manifest)
        .into_iter()
        .flat_map(|id| [(id, ActKind::Class), (id, ActKind::Instance)])
        .collect();
    jobs.into_par_iter()
        .map(|(id, kind)| {
            let path = dir.join(head_file_name(id, kind));
            let m = read_actbin(&path);
            (id, kind, path, m)
        })
        .collect()
}

/// Loads and fully validates a bundle directory.
pub fn load_bundle(dir: impl AsRef<Path>) -> Result<ActivationBundle> {
    let dir = dir.as_ref();
    let manifest = Manifest::read(dir.join(MANIFEST_FILE))?;
    let mut class_acts = BTreeMap::new();
    let mut instance_acts = BTreeMap::new();
    for (id, kind, path, m) in read_head_files(dir, &manifest) {
        let m = match m {
            Ok(m) => m,
            Err(Error::Io { source, .. }) if source.kind() == std::io::ErrorKind::NotFound => {
                return Err(Error::MissingFile {
                    layer: id.layer,
                    head: id.head,
                    kind,
                    path,
                })
            }
            Err(e) => return Err(e),
        };
        match kind {
            ActKind::Class => class_acts.insert(id, m),
            ActKind::Instance => instance_acts.insert(id, m),
        };
    }
    ActivationBundle::new(manifest, class_acts, instance_acts)
}

/// Reads a bundle directory, collecting every structural problem instead of
/// stopping at the first. Returns the bundle when there are none.
pub fn scan_bundle_dir(dir: impl AsRef<Path>) -> (Option<ActivationBundle>, Vec<Finding>) {
    let dir = dir.as_ref();
    let manifest = match Manifest::read(dir.join(MANIFEST_FILE)) {
        Ok(m) => m,
        Err(e) => {
            return (
                None,
                vec![Finding::ManifestUnreadable {
                    message: e.to_string(),
                }],
            )
        }
    };
    let mut findings = Vec::new();
    let mut class_acts = BTreeMap::new();
    let mut instance_acts = BTreeMap::new();
    for (id, kind, path, m) in read_head_files(dir, &manifest) {
        match m {
            Ok(m) => {
                match kind {
                    ActKind::Class => class_acts.insert(id, m),
                    ActKind::Instance => instance_acts.insert(id, m),
                };
            }
            Err(Error::Io { source, .. }) if source.kind() == std::io::ErrorKind::NotFound => {
                // reported by structural_findings below
                let _ = path;
            }
            Err(e) => findings.push(Finding::CorruptFile {
                layer: id.layer,
                head: id.head,
                kind,
                message: e.to_string(),
            }),
        }
    }
    let corrupt: Vec<(HeadId, ActKind)> = findings
        .iter()
        .filter_map(|f| match f {
            Finding::CorruptFile {
                layer, head, kind, ..
            } => Some((HeadId::new(*layer, *head), *kind)),
            _ => None,
        })
        .collect();
    for f in structural_findings(&manifest, &class_acts, &instance_acts) {
        // a corrupt file also shows up as missing; report it once
        if let Finding::MissingFile {
            layer, head, kind, ..
        } = &f
        {
            if corrupt.contains(&(HeadId::new(*layer, *head), *kind)) {
                continue;
            }
        }
        findings.push(f);
    }
    if findings.is_empty() {
        let bundle = ActivationBundle::new(manifest, class_acts, instance_acts).ok();
        (bundle, findings)
    } else {
        (None, findings)
    }
}
