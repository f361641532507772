pub mod canonical;
pub mod clock;
pub mod crypto;
pub mod door;
pub mod gossip;
pub mod market;
pub mod sim;
