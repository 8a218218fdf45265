//! Core machinery for accountable bulk email.
//!
//! Bulk senders label outgoing mail with an `X-Bulk-Mail` header; relays
//! keep a sliding-window log of header digests for mail they forward and
//! accept complaints that walk the `Received` chain back toward the
//! origin, moving a fixed micro-penalty one contracted hop at a time.
//! This crate holds the pieces shared by the SMTP proxy and the network
//! simulator: the message model, the digest, the hash log, per-client
//! rate/complaint policy, peer ledgers, and the relay decision logic
//! that ties them together.

pub mod addr;
pub mod bulk;
pub mod config;
pub mod digest;
pub mod events;
pub mod hashlog;
pub mod message;
pub mod penalty;
pub mod policy;
pub mod received;
pub mod relay;

pub use addr::{Address, Cents, DomainName};
pub use bulk::{BulkClass, InterestGroup, ListId};
pub use digest::HeaderDigest;
pub use message::MailMessage;
