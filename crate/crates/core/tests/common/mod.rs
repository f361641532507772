#![allow(dead_code)]

use std::sync::OnceLock;

use marketpalace_core::crypto::{certify_key, generate_keypair, CertifiedKey, KeyPair};

pub struct User {
    pub keys: KeyPair,
    pub cert: CertifiedKey,
}

pub struct World {
    pub server: KeyPair,
    pub rogue_server: KeyPair,
    pub users: Vec<User>,
}

/// Shared keys: one door server, one rogue server, four certified users.
pub fn world() -> &'static World {
    static W: OnceLock<World> = OnceLock::new();
    W.get_or_init(|| {
        let server = generate_keypair(2048).unwrap();
        let rogue_server = generate_keypair(2048).unwrap();
        let users = (0..4)
            .map(|_| {
                let keys = generate_keypair(2048).unwrap();
                let cert = certify_key(&server.private, &keys.public);
                User { keys, cert }
            })
            .collect();
        World { server, rogue_server, users }
    })
}
