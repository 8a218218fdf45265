//! SMTP proxy in front of a slave mail server.
//!
//! The proxy owns the policy surface: it admits or refuses peers,
//! authenticates local clients, enforces ingress checks, logs header
//! digests, intercepts complaints addressed to the spamsink mailbox,
//! and forwards everything it accepts to the slave server, relaying
//! the slave's verdict back to the submitter.

pub mod server;
pub mod smtp;

pub use server::{Proxy, ProxyError, ProxyHandle};
pub use smtp::{smtp_send, MailJob, Reply, SmtpError};
