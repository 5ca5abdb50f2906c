//! Helpers shared by every trained artifact: parameter (de)serialization and
//! the run-config stamp.

use gelina_tensor::{Checkpoint, ParamStore, Scalar};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const PARAM_PREFIX: &str = "param.";

/// Config key carrying the hash of the run configuration that produced an artifact.
pub const CONFIG_HASH_KEY: &str = "run.config_hash";

pub(crate) fn push_store<T: Scalar>(ck: &mut Checkpoint<T>, store: &ParamStore<T>) {
    for (name, t) in store.iter() {
        ck.push_tensor(format!("{PARAM_PREFIX}{name}"), t.clone());
    }
}

pub(crate) fn load_store<T: Scalar>(ck: &Checkpoint<T>, store: &mut ParamStore<T>) -> Result<()> {
    let entries = ck
        .tensors
        .iter()
        .filter_map(|(n, t)| n.strip_prefix(PARAM_PREFIX).map(|n| (n, t)));
    store.load_from(entries).map_err(Error::Format)
}

/// Lowercase hex SHA-256.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub(crate) fn parse_key<T: Scalar, V: std::str::FromStr>(ck: &Checkpoint<T>, key: &str) -> Result<V> {
    Ok(ck.parse(key)?)
}
