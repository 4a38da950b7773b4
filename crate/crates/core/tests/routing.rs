mod common;

use common::*;
use imobe_core::audit::AuditAction;
use imobe_core::auth::{AuthError, Credentials};
use imobe_core::behaviors::{saa_manage_account, AccountOp};
use imobe_core::kinds::{AgentKind, EndpointKind};
use imobe_core::platform::{ASSA_ID, SAA_ID, UIA_ID};
use imobe_core::protocol::{canonical_trace, route_allowed, MessageKind};
use imobe_core::runtime::{RejectReason, STORE_ENDPOINT};
use proptest::prelude::*;
use serde_json::json;

/// Every endpoint of a small running platform, with the credentials it sends with.
struct World {
    env: Env,
    endpoints: Vec<(String, EndpointKind, Credentials)>,
}

fn world() -> World {
    let env = platform(&small_fixture());
    let system = env.platform.system_credentials();
    let (lect, _) = env.session("lect", "sess-lect");
    let (stu, _) = env.session("s1", "sess-stu");
    let (admin, _) = env.session("admin", "sess-admin");
    let agent = |id: &str, kind| (id.to_string(), EndpointKind::Agent(kind), system.clone());
    let endpoints = vec![
        ("sess-lect".to_string(), EndpointKind::Client, lect),
        ("sess-stu".to_string(), EndpointKind::Client, stu),
        ("sess-admin".to_string(), EndpointKind::Client, admin),
        agent(UIA_ID, AgentKind::UIA),
        agent(ASSA_ID, AgentKind::AssA),
        agent(SAA_ID, AgentKind::SAA),
        agent("aa-sess-lect", AgentKind::AA),
        agent("sa-sess-stu", AgentKind::SA),
        (STORE_ENDPOINT.to_string(), EndpointKind::Store, system.clone()),
    ];
    World { env, endpoints }
}

impl World {
    fn send(&self, from: usize, to: usize, kind: MessageKind, corr: &str) -> Result<(), RejectReason> {
        let (from_id, _, creds) = &self.endpoints[from];
        let (to_id, _, _) = &self.endpoints[to];
        let env = self
            .env
            .platform
            .runtime
            .envelope(from_id, to_id, kind, corr, creds.clone(), json!({}));
        self.env.platform.runtime.deliver(env).map_err(|r| r.reason)
    }
}

#[test]
fn every_pair_is_accepted_exactly_when_routed() {
    let w = world();
    let mut n = 0;
    for from in 0..w.endpoints.len() {
        for to in 0..w.endpoints.len() {
            for kind in MessageKind::ALL {
                n += 1;
                let allowed = route_allowed(w.endpoints[from].1, w.endpoints[to].1, kind);
                let result = w.send(from, to, kind, &format!("pair-{n}"));
                assert_eq!(
                    result.is_ok(),
                    allowed,
                    "{} -> {} {kind}: {result:?}",
                    w.endpoints[from].0,
                    w.endpoints[to].0
                );
                if !allowed {
                    assert_eq!(result, Err(RejectReason::RouteForbidden));
                }
            }
        }
    }
}

fn arb_deliveries() -> impl Strategy<Value = Vec<(usize, usize, MessageKind, bool)>> {
    prop::collection::vec(
        (0usize..9, 0usize..9, prop::sample::select(MessageKind::ALL.to_vec()), any::<bool>()),
        200,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(60))]

    #[test]
    fn fuzzed_traffic_never_leaves_the_route_table(deliveries in arb_deliveries()) {
        let w = world();
        let (assa, store) = (4, 8);
        for (i, (from, to, kind, step)) in deliveries.into_iter().enumerate() {
            let result = w.send(from, to, kind, &format!("f-{}", i % 37));
            if w.endpoints[from].1 == EndpointKind::Client && (to == assa || to == store) {
                prop_assert!(result.is_err());
            }
            if step {
                w.env.platform.runtime.step();
            }
        }
        w.env.platform.runtime.run_until_idle();
        for corr in w.env.platform.runtime.correlations() {
            for entry in w.env.platform.runtime.trace(&corr) {
                prop_assert!(route_allowed(entry.from, entry.to, entry.envelope.kind), "{}", entry.step());
                prop_assert!(w.env.platform.auth.authenticate(&entry.envelope.credentials).is_ok());
            }
        }
    }
}

/// Replaces the credentials of each canonical step with a bad token and
/// expects one rejection and one AuthFailure audit event per attempt.
#[test]
fn bad_tokens_are_refused_at_every_step() {
    let w = world();
    let platform = &w.env.platform;
    let find = |kind: EndpointKind, delegate: AgentKind| -> usize {
        w.endpoints
            .iter()
            .position(|(id, k, _)| {
                *k == kind && (kind != EndpointKind::Client || id == if delegate == AgentKind::AA { "sess-lect" } else { "sess-stu" })
            })
            .unwrap()
    };
    let disabled = {
        let (creds, _) = w.env.session("s2", "sess-s2");
        let (admin_creds, _) = w.env.platform.login("admin", "admin-pw").unwrap();
        saa_manage_account(&platform.store, platform.audit.as_ref(), &admin_creds, AccountOp::Disable { principal: "s2".into() }).unwrap();
        creds
    };
    let mut attempts = 0;
    for delegate in [AgentKind::AA, AgentKind::SA] {
        for step in canonical_trace(delegate) {
            let from = find(step.from, delegate);
            let to = find(step.to, delegate);
            let good = w.endpoints[from].2.clone();
            let forged = Credentials {
                token: "00".repeat(32),
                ..good.clone()
            };
            let expired = platform.signer.issue_at(&good.principal, START_MS - 3_601_000);
            let cases = [
                (forged, AuthError::InvalidCredentials),
                (expired, AuthError::ExpiredCredentials),
                (disabled.clone(), AuthError::UnknownPrincipal("s2".into())),
            ];
            for (creds, want) in cases {
                attempts += 1;
                let before = platform.audit.count(AuditAction::AuthFailure);
                let env = platform.runtime.envelope(
                    &w.endpoints[from].0,
                    &w.endpoints[to].0,
                    step.kind,
                    &format!("bad-{attempts}"),
                    creds,
                    json!({}),
                );
                let rejection = platform.runtime.deliver(env).unwrap_err();
                assert_eq!(rejection.reason, RejectReason::Auth(want.clone()), "{step}");
                assert_eq!(platform.audit.count(AuditAction::AuthFailure), before + 1, "{step}");
            }
        }
    }
    assert_eq!(attempts, 3 * 17);
    // the only traffic a bad token causes is the ERROR bounced to its sender
    for corr in platform.runtime.correlations().iter().filter(|c| c.starts_with("bad-")) {
        for entry in platform.runtime.trace(corr) {
            assert_eq!(entry.envelope.kind, MessageKind::Error);
            assert!(platform.auth.authenticate(&entry.envelope.credentials).is_ok());
        }
    }
}
