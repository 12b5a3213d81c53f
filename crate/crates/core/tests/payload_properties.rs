//! Attribute payload confidentiality.

use pefim::crypto::{
    decrypt_payload, derive_content_key, open_with_content_key, EncryptionSecretKey,
    HybridCipher, NullCipher, PayloadCipher, PayloadError, Serial,
};
use pefim::Attributes;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn attrs() -> impl Strategy<Value = Attributes> {
    prop::collection::btree_map("[a-zA-Z]{1,12}", "[A-Za-z][A-Za-z0-9 @.-]{7,30}", 1..5)
}

fn contains(haystack: &[u8], needle: &[u8]) -> bool {
    haystack.windows(needle.len()).any(|w| w == needle)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn ciphertext_never_contains_plaintext(a in attrs(), seed in any::<u64>()) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let sk = EncryptionSecretKey::from_seed([1; 32]);
        let p = HybridCipher.seal(&serde_json::to_vec(&a).unwrap(), &sk.public_key(), Serial([2; 16]), &mut rng);
        let wire = serde_json::to_vec(&p).unwrap();
        for v in a.values() {
            prop_assert!(!contains(&p.ciphertext, v.as_bytes()));
            prop_assert!(!contains(&wire, v.as_bytes()));
        }
        prop_assert!(p.observable_plaintext().is_none());
        prop_assert_eq!(decrypt_payload(&p, &sk).unwrap(), a);
    }
}

proptest! {
    #[test]
    fn wrong_key_fails(a in attrs(), s1 in any::<[u8; 32]>(), s2 in any::<[u8; 32]>()) {
        prop_assume!(s1 != s2);
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let right = EncryptionSecretKey::from_seed(s1);
        let wrong = EncryptionSecretKey::from_seed(s2);
        let p = HybridCipher.seal(&serde_json::to_vec(&a).unwrap(), &right.public_key(), Serial([0; 16]), &mut rng);
        prop_assert_eq!(decrypt_payload(&p, &wrong), Err(PayloadError::DecryptionFailure));
    }

    #[test]
    fn content_key_opens_only_its_payload(a in attrs(), b in attrs()) {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let sk = EncryptionSecretKey::from_seed([4; 32]);
        let pa = HybridCipher.seal(&serde_json::to_vec(&a).unwrap(), &sk.public_key(), Serial([1; 16]), &mut rng);
        let pb = HybridCipher.seal(&serde_json::to_vec(&b).unwrap(), &sk.public_key(), Serial([1; 16]), &mut rng);
        let ck = derive_content_key(&pa, &sk).unwrap();
        prop_assert_eq!(open_with_content_key(&pa, &ck).unwrap(), a);
        prop_assert!(open_with_content_key(&pb, &ck).is_err());
    }
}

#[test]
fn null_cipher_is_observable() {
    let mut rng = ChaCha20Rng::seed_from_u64(0);
    let a: Attributes = [("mail".to_string(), "x@y.example".to_string())].into();
    let sk = EncryptionSecretKey::from_seed([1; 32]);
    let p = NullCipher.seal(&serde_json::to_vec(&a).unwrap(), &sk.public_key(), Serial([0; 16]), &mut rng);
    assert_eq!(p.observable_plaintext(), Some(a));
}
