//! Shared fixtures for integration tests: cached identities (RSA keygen
//! dominates test time) and config builders.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex, OnceLock};

use uasec_core::client::{ClientConfig, UserIdentity};
use uasec_core::pki::{generate_identity, Identity, TrustPolicy, TrustStore};
use uasec_core::server::{EndpointConfig, NodeStore, ServerConfig};
use uasec_core::codec::UserTokenType;

pub const OPERATOR: &str = "operator";
pub const SECRET: &str = "secret";

pub fn server_identity() -> &'static Identity {
    static ID: OnceLock<Identity> = OnceLock::new();
    ID.get_or_init(|| generate_identity("VictimServer", "urn:victim:server", 365, 2048).unwrap())
}

pub fn client_identity() -> &'static Identity {
    static ID: OnceLock<Identity> = OnceLock::new();
    ID.get_or_init(|| generate_identity("VictimClient", "urn:victim:client", 365, 2048).unwrap())
}

pub fn attacker_identity() -> &'static Identity {
    static ID: OnceLock<Identity> = OnceLock::new();
    ID.get_or_init(|| generate_identity("Nondescript", "urn:nondescript:app", 365, 2048).unwrap())
}

/// Server with None + Sign + SignAndEncrypt endpoints, the demo node
/// store, one user account, and the given trust policy.
pub fn base_server_config(trust_policy: TrustPolicy) -> ServerConfig {
    let mut config = ServerConfig::new(server_identity().clone());
    config.application_name = "VictimServer".into();
    config.application_uri = "urn:victim:server".into();
    config.endpoints = vec![
        EndpointConfig::none(vec![UserTokenType::Anonymous, UserTokenType::UserName]),
        EndpointConfig::sign(vec![UserTokenType::Anonymous, UserTokenType::UserName]),
        EndpointConfig::sign_and_encrypt(vec![UserTokenType::Anonymous, UserTokenType::UserName]),
    ];
    config.trust_policy = trust_policy;
    config.users = BTreeMap::from([(OPERATOR.to_string(), SECRET.to_string())]);
    config.nodes = NodeStore::demo();
    config
}

/// Strict server pre-provisioned to trust the victim client.
pub fn provisioned_server_config() -> ServerConfig {
    let config = base_server_config(TrustPolicy::Strict);
    {
        let mut store = config.trust_store.lock().unwrap();
        store.add_trusted(client_identity().certificate.clone()).unwrap();
    }
    config
}

/// Client config for the victim, trusting the victim server.
pub fn provisioned_client_config(user: UserIdentity) -> ClientConfig {
    let mut config = ClientConfig::new();
    config.identity = Some(client_identity().clone());
    config.trust_policy = TrustPolicy::Strict;
    let store = TrustStore::new();
    config.trust_store = Arc::new(Mutex::new(store));
    config
        .trust_store
        .lock()
        .unwrap()
        .add_trusted(server_identity().certificate.clone())
        .unwrap();
    config.application_uri = "urn:victim:client".into();
    config.user_identity = user;
    config
}
