//! Client ↔ server self-interop over loopback: discovery, secure channel
//! establishment, session auth, reads and writes, and the server-side
//! trust gate.

mod common;

use std::io::{Read, Write};
use std::net::TcpStream;
use std::time::Duration;

use common::*;
use uasec_core::client::{self, ClientConfig, UserIdentity};
use uasec_core::codec::{NodeId, SecurityMode, UaString, Value};
use uasec_core::pki::TrustPolicy;
use uasec_core::server::{demo_nodes, serve};
use uasec_core::status::StatusCode;
use uasec_core::client::ClientError;

#[test]
fn discover_lists_all_configured_endpoints() {
    let server = serve(provisioned_server_config()).unwrap();
    let endpoints = client::discover(&server.url()).unwrap();
    assert_eq!(endpoints.len(), 3);
    let modes: Vec<SecurityMode> = endpoints.iter().map(|e| e.security_mode).collect();
    assert!(modes.contains(&SecurityMode::None));
    assert!(modes.contains(&SecurityMode::Sign));
    assert!(modes.contains(&SecurityMode::SignAndEncrypt));
    // Certificate travels with the (unauthenticated) endpoint list.
    for endpoint in &endpoints {
        assert_eq!(endpoint.server_certificate.as_bytes(), server_identity().certificate.der);
    }
    server.stop();
}

#[test]
fn find_servers_reports_application_description() {
    let server = serve(provisioned_server_config()).unwrap();
    let servers = client::find_servers(&server.url()).unwrap();
    assert_eq!(servers.len(), 1);
    assert_eq!(servers[0].application_uri.as_text(), "urn:victim:server");
    server.stop();
}

#[test]
fn unreachable_host_is_connect_failed() {
    // Port 1 on loopback is essentially never bound.
    let err = client::discover("opc.tcp://127.0.0.1:1").unwrap_err();
    assert!(matches!(err, ClientError::ConnectFailed(_)));
}

#[test]
fn sign_and_encrypt_session_reads_and_writes() {
    let server = serve(provisioned_server_config()).unwrap();
    let endpoints = client::discover(&server.url()).unwrap();
    let endpoint = client::select_most_secure(&endpoints).unwrap();
    assert_eq!(endpoint.security_mode, SecurityMode::SignAndEncrypt);

    let config = provisioned_client_config(UserIdentity::UserName {
        username: OPERATOR.into(),
        password: SECRET.into(),
    });
    let mut session = client::connect(endpoint, &config).unwrap();

    let sensor = session.read(&demo_nodes::sensor()).unwrap();
    assert_eq!(sensor, Value::Double(demo_nodes::SENSOR_INITIAL));

    let status = session.write(&demo_nodes::setpoint(), Value::Double(42.0)).unwrap();
    assert!(status.is_good());
    assert_eq!(session.read(&demo_nodes::setpoint()).unwrap(), Value::Double(42.0));

    // Server-side store agrees.
    assert_eq!(server.peek_node(&demo_nodes::setpoint()).unwrap(), Value::Double(42.0));
    session.close();
    server.stop();
}

#[test]
fn sign_mode_session_works() {
    let server = serve(provisioned_server_config()).unwrap();
    let endpoints = client::discover(&server.url()).unwrap();
    let endpoint =
        endpoints.iter().find(|e| e.security_mode == SecurityMode::Sign).unwrap();
    let config = provisioned_client_config(UserIdentity::Anonymous);
    let mut session = client::connect(endpoint, &config).unwrap();
    assert_eq!(
        session.read(&demo_nodes::status()).unwrap(),
        Value::String(UaString::new(demo_nodes::STATUS_INITIAL))
    );
    session.close();
    server.stop();
}

#[test]
fn mode_none_session_with_encrypted_password_token() {
    let server = serve(provisioned_server_config()).unwrap();
    let endpoints = client::discover(&server.url()).unwrap();
    let endpoint =
        endpoints.iter().find(|e| e.security_mode == SecurityMode::None).unwrap();
    // Even with no channel protection the password token is encrypted to
    // the server certificate by default.
    let mut config = provisioned_client_config(UserIdentity::UserName {
        username: OPERATOR.into(),
        password: SECRET.into(),
    });
    config.identity = None;
    let mut session = client::connect(endpoint, &config).unwrap();
    assert_eq!(
        session.read(&demo_nodes::sensor()).unwrap(),
        Value::Double(demo_nodes::SENSOR_INITIAL)
    );
    session.close();
    server.stop();
}

#[test]
fn wrong_password_is_access_denied() {
    let server = serve(provisioned_server_config()).unwrap();
    let endpoints = client::discover(&server.url()).unwrap();
    let endpoint = client::select_most_secure(&endpoints).unwrap();
    let config = provisioned_client_config(UserIdentity::UserName {
        username: OPERATOR.into(),
        password: "wrong".into(),
    });
    let err = client::connect(endpoint, &config).unwrap_err();
    assert!(
        matches!(err, ClientError::AuthFailed(StatusCode::BAD_USER_ACCESS_DENIED)),
        "got {err:?}"
    );
    server.stop();
}

#[test]
fn anonymous_rejected_when_disallowed() {
    let mut server_config = provisioned_server_config();
    server_config.anonymous_allowed = false;
    let server = serve(server_config).unwrap();
    let endpoints = client::discover(&server.url()).unwrap();
    let endpoint = client::select_most_secure(&endpoints).unwrap();
    let config = provisioned_client_config(UserIdentity::Anonymous);
    let err = client::connect(endpoint, &config).unwrap_err();
    assert!(
        matches!(err, ClientError::AuthFailed(StatusCode::BAD_IDENTITY_TOKEN_REJECTED)),
        "got {err:?}"
    );
    server.stop();
}

#[test]
fn untrusted_client_refused_by_strict_server() {
    let server = serve(base_server_config(TrustPolicy::Strict)).unwrap();
    let endpoints = client::discover(&server.url()).unwrap();
    let endpoint = client::select_most_secure(&endpoints).unwrap();
    let mut config = provisioned_client_config(UserIdentity::Anonymous);
    config.identity = Some(attacker_identity().clone());
    let err = client::connect(endpoint, &config).unwrap_err();
    match err {
        ClientError::ServerClosed { status, .. } => {
            assert_eq!(status, StatusCode::BAD_CERTIFICATE_UNTRUSTED);
        }
        other => panic!("expected trust rejection from server, got {other:?}"),
    }
    assert!(server.acceptances().is_empty());
    server.stop();
}

#[test]
fn untrusted_client_accepted_under_accept_all() {
    let server = serve(base_server_config(TrustPolicy::AcceptAll)).unwrap();
    let endpoints = client::discover(&server.url()).unwrap();
    let endpoint = client::select_most_secure(&endpoints).unwrap();
    let mut config = provisioned_client_config(UserIdentity::Anonymous);
    config.identity = Some(attacker_identity().clone());
    let session = client::connect(endpoint, &config).unwrap();
    assert_eq!(server.acceptances().len(), 1);
    session.close();
    server.stop();
}

#[test]
fn auto_accept_flag_on_accepts_and_flag_off_refuses() {
    for (auto_accept, expect_ok) in [(true, true), (false, false)] {
        let server = serve(base_server_config(TrustPolicy::AcceptAllDefaultFlag {
            auto_accept,
        }))
        .unwrap();
        let endpoints = client::discover(&server.url()).unwrap();
        let endpoint = client::select_most_secure(&endpoints).unwrap();
        let mut config = provisioned_client_config(UserIdentity::Anonymous);
        config.identity = Some(attacker_identity().clone());
        let result = client::connect(endpoint, &config);
        assert_eq!(result.is_ok(), expect_ok, "auto_accept={auto_accept}");
        server.stop();
    }
}

#[test]
fn two_sessions_get_distinct_channel_ids() {
    let server = serve(provisioned_server_config()).unwrap();
    let endpoints = client::discover(&server.url()).unwrap();
    let endpoint = client::select_most_secure(&endpoints).unwrap();
    let config = provisioned_client_config(UserIdentity::Anonymous);
    let first = client::connect(endpoint, &config).unwrap();
    let second = client::connect(endpoint, &config).unwrap();
    assert_ne!(first.channel_id(), second.channel_id());
    first.close();
    second.close();
    server.stop();
}

#[test]
fn stop_releases_the_port() {
    let mut config = provisioned_server_config();
    let server = serve(config.clone()).unwrap();
    let addr = server.local_addr();
    server.stop();
    config.listen = addr;
    // Rebinding the same port succeeds once the first listener is gone.
    let again = serve(config).unwrap();
    assert_eq!(again.local_addr(), addr);
    again.stop();
}

#[test]
fn requested_mode_must_be_advertised() {
    // Server only offers SignAndEncrypt; doctor the endpoint descriptor to
    // claim Sign and verify the server refuses the channel.
    let mut config = base_server_config(TrustPolicy::AcceptAll);
    config.endpoints = vec![uasec_core::server::EndpointConfig::sign_and_encrypt(vec![
        uasec_core::codec::UserTokenType::Anonymous,
    ])];
    let server = serve(config).unwrap();
    let endpoints = client::discover(&server.url()).unwrap();
    let mut endpoint = endpoints[0].clone();
    endpoint.security_mode = SecurityMode::Sign;
    let client_config = provisioned_client_config(UserIdentity::Anonymous);
    let err = client::connect(&endpoint, &client_config).unwrap_err();
    match err {
        ClientError::ServerClosed { status, .. } => {
            assert_eq!(status, StatusCode::BAD_SECURITY_MODE_REJECTED);
        }
        other => panic!("expected mode rejection, got {other:?}"),
    }
    server.stop();
}

#[test]
fn read_unknown_node_faults_per_node() {
    let server = serve(provisioned_server_config()).unwrap();
    let endpoints = client::discover(&server.url()).unwrap();
    let endpoint = client::select_most_secure(&endpoints).unwrap();
    let config = provisioned_client_config(UserIdentity::Anonymous);
    let mut session = client::connect(endpoint, &config).unwrap();
    let err = session.read(&NodeId::numeric(1, 9999)).unwrap_err();
    assert!(matches!(err, ClientError::Fault(StatusCode::BAD_NODE_ID_UNKNOWN)));
    let status = session.write(&demo_nodes::sensor(), Value::Double(0.0)).unwrap();
    assert_eq!(status, StatusCode::BAD_NOT_WRITABLE);
    session.close();
    server.stop();
}

#[test]
fn no_read_or_write_without_activation() {
    // Scripted attacker: opens a plain channel, creates a session, skips
    // ActivateSession and goes straight to Read.
    use uasec_core::codec::service::{CreateSessionRequest, ReadRequest, RequestHeader};
    use uasec_core::codec::{
        encode_chunks, reassemble, HeaderKind, ServiceBody, UaByteString,
    };
    use uasec_core::secchan::SecureChannelState;

    let server = serve(provisioned_server_config()).unwrap();
    let endpoints = client::discover(&server.url()).unwrap();
    let endpoint = endpoints
        .iter()
        .find(|e| e.security_mode == SecurityMode::None)
        .unwrap()
        .clone();

    let mut config = provisioned_client_config(UserIdentity::Anonymous);
    config.identity = None;
    // A legitimate connect for comparison, then a raw probe below.
    let session = client::connect(&endpoint, &config).unwrap();
    session.close();

    // Raw probe: channel + session but no activation.
    let url = endpoint.endpoint_url.as_text().into_owned();
    let (host, port) = uasec_core::transport::parse_opc_url(&url).unwrap();
    let mut conn = uasec_core::transport::Conn::connect(&host, port, None).unwrap();
    conn.client_handshake(&url).unwrap();

    let mut state = SecureChannelState::plain(0, 0);
    let open = ServiceBody::OpenSecureChannelRequest(
        uasec_core::codec::service::OpenSecureChannelRequest {
            header: RequestHeader { auth_token: UaByteString::NULL, request_handle: 1 },
            client_protocol_version: 0,
            request_type: 0,
            security_mode: SecurityMode::None,
            client_nonce: UaByteString::new(vec![]),
            requested_lifetime_ms: 60_000,
        },
    );
    let chunks =
        encode_chunks(&open, HeaderKind::Asymmetric, Some(&mut state.chunk_channel()), 1, 65536)
            .unwrap();
    conn.write_chunk(&chunks[0]).unwrap();
    let reply = conn.read_chunk().unwrap();
    let (body, _) = reassemble(std::slice::from_ref(&reply)).unwrap();
    let ServiceBody::OpenSecureChannelResponse(open_response) = body else { panic!() };
    state.channel_id = open_response.channel_id;
    state.token_id = open_response.token_id;

    let create = ServiceBody::CreateSessionRequest(CreateSessionRequest {
        header: RequestHeader { auth_token: UaByteString::NULL, request_handle: 2 },
        endpoint_url: UaString::new(url.clone()),
        session_name: UaString::new("probe"),
        client_nonce: UaByteString::new(vec![1u8; 32]),
        client_certificate: UaByteString::NULL,
    });
    let chunks =
        encode_chunks(&create, HeaderKind::Symmetric, Some(&mut state.chunk_channel()), 2, 65536)
            .unwrap();
    conn.write_chunk(&chunks[0]).unwrap();
    let reply = conn.read_chunk().unwrap();
    let (body, _) = reassemble(std::slice::from_ref(&reply)).unwrap();
    let ServiceBody::CreateSessionResponse(created) = body else { panic!() };

    let read = ServiceBody::ReadRequest(ReadRequest {
        header: RequestHeader {
            auth_token: created.auth_token.clone(),
            request_handle: 3,
        },
        nodes: vec![demo_nodes::sensor()],
    });
    let chunks =
        encode_chunks(&read, HeaderKind::Symmetric, Some(&mut state.chunk_channel()), 3, 65536)
            .unwrap();
    conn.write_chunk(&chunks[0]).unwrap();
    let reply = conn.read_chunk().unwrap();
    let (body, _) = reassemble(std::slice::from_ref(&reply)).unwrap();
    let ServiceBody::ServiceFault(fault) = body else {
        panic!("read before activation must fault, got {}", body.type_name());
    };
    assert_eq!(fault.header.service_result, StatusCode::BAD_SESSION_NOT_ACTIVATED);
    server.stop();
}

#[test]
fn trust_gate_holds_against_hostile_byte_sequences() {
    // Under Strict with an empty trustlist, no sequence of client bytes
    // may produce an open secure channel on a secure endpoint. Drive raw
    // TCP with a mix of garbage and near-valid traffic and require that
    // no OpenSecureChannelResponse ever comes back.
    use rand::{Rng, SeedableRng};
    let server = serve(base_server_config(TrustPolicy::Strict)).unwrap();
    let addr = server.local_addr();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0xBAD5EED);

    let hello = {
        // A well-formed Hello so some probes get past the handshake.
        let body = uasec_core::codec::ServiceBody::Hello(uasec_core::codec::service::Hello {
            protocol_version: 0,
            receive_buffer_size: 65536,
            send_buffer_size: 65536,
            max_message_size: 1 << 20,
            max_chunk_count: 64,
            endpoint_url: UaString::new(format!("opc.tcp://{addr}")),
        });
        uasec_core::codec::encode_chunks(&body, uasec_core::codec::HeaderKind::Raw, None, 0, 65536)
            .unwrap()
            .remove(0)
    };

    for round in 0..40 {
        let mut stream = TcpStream::connect(addr).unwrap();
        stream.set_read_timeout(Some(Duration::from_millis(200))).unwrap();
        if round % 2 == 0 {
            let _ = stream.write_all(&hello);
            let mut ack = [0u8; 64];
            let _ = stream.read(&mut ack);
        }
        // Random probe, OPN-tagged half the time to aim at the gate.
        let len = rng.gen_range(8..512);
        let mut probe: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
        if rng.gen_bool(0.5) {
            probe[..4].copy_from_slice(b"OPNF");
            let size = (probe.len() as u32).to_le_bytes();
            probe[4..8].copy_from_slice(&size);
        }
        let _ = stream.write_all(&probe);

        let mut response = Vec::new();
        let mut buf = [0u8; 4096];
        while let Ok(n) = stream.read(&mut buf) {
            if n == 0 {
                break;
            }
            response.extend_from_slice(&buf[..n]);
            if response.len() > 1 << 16 {
                break;
            }
        }
        // An OPN chunk in the response would mean the gate fell.
        assert!(
            !response.windows(4).any(|w| w == b"OPNF"),
            "strict server answered a hostile probe with an OPN chunk"
        );
    }
    assert!(server.acceptances().is_empty());
    server.stop();
}
