//! Run manifest: the effective config plus provenance comments.

use sha2::{Digest, Sha256};

use scout_core::config::TrainConfig;

/// Git-style content hash: SHA-256 over `"blob <len>\0" ++ content`.
pub fn content_hash(content: &str) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content.as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub const LAYOUT: &str = "manifest.cfg metrics.csv episodes.csv ckpt_<env_steps>.bin frames/";

/// Manifest text. Provenance lines are comments, so the file parses back to
/// exactly `config`.
pub fn render(config: &TrainConfig) -> String {
    let body = config.to_text();
    format!(
        "# config_hash = {}\n# variant = {}\n# counterfactual = {}\n# seeds = {}\n# layout = {}\n{}",
        content_hash(&body),
        config.variant,
        config.variant != scout_core::config::Variant::NoCounterfactual,
        config.seed,
        LAYOUT,
        body
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_matches_git_blob_construction() {
        // sha256 of "blob 0\0", the git SHA-256 id of the empty blob.
        assert_eq!(
            content_hash(""),
            "473a0f4c3be8a93681a267e3b1e9a7dcda1185436fe141f7749120a303721813"
        );
    }

    #[test]
    fn manifest_reparses_to_the_config() {
        let mut c = TrainConfig::default();
        c.seed = 7;
        c.total_steps = 1234;
        assert_eq!(TrainConfig::parse_text(&render(&c)).unwrap(), c);
    }
}
