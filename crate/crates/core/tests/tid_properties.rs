//! Targeted identifier derivation against an independent HMAC-SHA256.

use std::collections::HashSet;

use pefim::federation::EntityId;
use pefim::idmap::{tid_value, DerivationKey, Tier, TidIssuer};
use proptest::prelude::*;
use sha2::{Digest, Sha256};

/// HMAC-SHA256 built from the bare hash, block size 64.
fn hmac_sha256(key: &[u8], msg: &[u8]) -> [u8; 32] {
    let mut k = [0u8; 64];
    if key.len() > 64 {
        k[..32].copy_from_slice(&Sha256::digest(key));
    } else {
        k[..key.len()].copy_from_slice(key);
    }
    let pad = |b: u8| k.iter().map(|x| x ^ b).collect::<Vec<u8>>();
    let inner = Sha256::new().chain_update(pad(0x36)).chain_update(msg).finalize();
    Sha256::new().chain_update(pad(0x5c)).chain_update(inner).finalize().into()
}

/// Length-prefixed, domain-separated derivation input.
fn oracle(key: &[u8; 32], parent: &str, scope: &[&str], tier: u8) -> String {
    let mut msg = b"pefim-tid-v1".to_vec();
    msg.push(tier);
    msg.extend((parent.len() as u32).to_be_bytes());
    msg.extend(parent.as_bytes());
    msg.extend((scope.len() as u32).to_be_bytes());
    for s in scope {
        msg.extend((s.len() as u32).to_be_bytes());
        msg.extend(s.as_bytes());
    }
    hex::encode(hmac_sha256(key, &msg))
}

fn ids(xs: &[&str]) -> Vec<EntityId> {
    xs.iter().map(|s| EntityId::new(*s)).collect()
}

#[test]
fn matches_oracle_for_every_tier() {
    let key = [0x42; 32];
    let k = DerivationKey(key);
    let cases: [(&str, &[&str], Tier, u8); 3] = [
        ("ref-0001", &["sb.broker.example"], Tier::Tid1, 1),
        ("tid1-parent", &["library.example"], Tier::Tid2, 2),
        ("tid1-parent", &["library.example", "bikeshare.example"], Tier::Tid3, 3),
    ];
    for (parent, scope, tier, tag) in cases {
        let got = tid_value(&k, parent, &ids(scope), tier).unwrap();
        assert_eq!(got.as_str(), oracle(&key, parent, scope, tag));
        assert_eq!(got.as_str().len(), 64);
        assert!(got.as_str().bytes().all(|b| b.is_ascii_hexdigit() && !b.is_ascii_uppercase()));
    }
}

#[test]
fn oracle_agrees_with_rfc4231_case_2() {
    let mac = hmac_sha256(b"Jefe", b"what do ya want for nothing?");
    assert_eq!(
        hex::encode(mac),
        "5bdcc146bf60754e6a042426089575c75a003f089d2739839dec58b964ec3843"
    );
}

#[test]
fn ten_thousand_derivations_do_not_collide() {
    let mut issuer = TidIssuer::new("idp.northuni.example".into(), DerivationKey([7; 32]));
    let sb = ids(&["sb.broker.example"]);
    let mut seen = HashSet::new();
    for i in 0..10_000 {
        let v = issuer.derive_tid(&format!("ref-{i:06}"), &sb, Tier::Tid1).unwrap().value;
        assert!(seen.insert(v), "collision at {i}");
    }
    assert_eq!(issuer.table().len(), 10_000);
}

proptest! {
    #[test]
    fn deterministic_and_scope_separated(
        parent in "[a-z0-9-]{1,40}",
        a in "[a-z]{1,12}\\.example",
        b in "[a-z]{1,12}\\.example",
    ) {
        let k = DerivationKey([9; 32]);
        let va = tid_value(&k, &parent, &ids(&[&a]), Tier::Tid2).unwrap();
        prop_assert_eq!(&va, &tid_value(&k, &parent, &ids(&[&a]), Tier::Tid2).unwrap());
        let vb = tid_value(&k, &parent, &ids(&[&b]), Tier::Tid2).unwrap();
        prop_assert_eq!(a == b, va == vb);
        // Same parent and scope under another tier is a different identifier.
        prop_assert_ne!(va, tid_value(&k, &parent, &ids(&[&a]), Tier::Tid1).unwrap());
    }

    #[test]
    fn each_key_gives_its_own_identifiers(k1 in any::<[u8; 32]>(), k2 in any::<[u8; 32]>(), parent in "[a-z0-9]{1,20}") {
        prop_assume!(k1 != k2);
        let scope = ids(&["sb.broker.example"]);
        prop_assert_ne!(
            tid_value(&DerivationKey(k1), &parent, &scope, Tier::Tid1).unwrap(),
            tid_value(&DerivationKey(k2), &parent, &scope, Tier::Tid1).unwrap()
        );
    }

    #[test]
    fn tid3_order_matters(parent in "[a-z0-9]{1,20}") {
        let k = DerivationKey([3; 32]);
        let ab = tid_value(&k, &parent, &ids(&["a.example", "b.example"]), Tier::Tid3).unwrap();
        let ba = tid_value(&k, &parent, &ids(&["b.example", "a.example"]), Tier::Tid3).unwrap();
        prop_assert_ne!(ab, ba);
    }

    #[test]
    fn length_prefix_prevents_concatenation_clashes(x in "[a-z]{1,8}", y in "[a-z]{1,8}") {
        let k = DerivationKey([5; 32]);
        let joined = tid_value(&k, &format!("{x}{y}"), &ids(&["s"]), Tier::Tid2).unwrap();
        let split = tid_value(&k, &x, &ids(&[&format!("{y}s")]), Tier::Tid2).unwrap();
        prop_assert_ne!(joined, split);
    }
}
