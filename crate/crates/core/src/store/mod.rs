// SPDX-License-Identifier: MIT OR Apache-2.0

//! On-disk activation bundles.
//!
//! A bundle directory holds `manifest.json` plus, for every `(L, H)` the
//! manifest declares, `layer{L}_head{H}_class.actbin` (`K × head_dim`) and
//! `layer{L}_head{H}_inst.actbin` (`N × head_dim`). Rows are captured at the
//! manifest's `position_policy` position (default `"last"`), and "head
//! activation" means that head's attention output after its slice of the
//! output projection.

mod actbin;
mod bundle;
mod jsonio;
mod manifest;
mod validate;

pub use actbin::{
    decode_actbin, encode_actbin, read_actbin, round_to_f32, write_actbin, HEADER_LEN, MAGIC,
    VERSION,
};
pub use bundle::{
    expected_heads, head_file_name, load_bundle, manifest_findings, scan_bundle_dir,
    structural_findings, write_bundle, ActivationBundle, Finding, HeadId, MANIFEST_FILE,
};
pub use jsonio::{read_json, write_json};
pub use manifest::{InstancePrompt, Manifest, DEFAULT_POSITION_POLICY};
pub use validate::{validate_bundle, validate_dir, HeadStats, ValidationReport};
