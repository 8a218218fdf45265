//! SMTP wire handling shared by the server and the outbound client:
//! line framing, reply parsing, command parsing, dot-stuffed bodies.

use std::time::Duration;

use thiserror::Error;
use tokio::io::{AsyncBufRead, AsyncBufReadExt, AsyncWrite, AsyncWriteExt, BufReader};
use tokio::net::TcpStream;
use tokio::time::timeout;

/// Commands and replies must fit one line of this size.
pub const MAX_LINE: usize = 8 * 1024;

/// Upper bound on a DATA payload.
pub const MAX_MESSAGE: usize = 16 * 1024 * 1024;

/// How long the client waits for any single reply.
const REPLY_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Error)]
pub enum SmtpError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("connection closed mid-dialogue")]
    Closed,
    #[error("line exceeds {MAX_LINE} bytes")]
    LineTooLong,
    #[error("message exceeds {MAX_MESSAGE} bytes")]
    MessageTooLarge,
    #[error("malformed reply: {0:?}")]
    BadReply(String),
    #[error("{phase} refused: {code} {text}")]
    Refused {
        phase: &'static str,
        code: u16,
        text: String,
    },
    #[error("timed out waiting for a reply")]
    Timeout,
}

/// One SMTP reply, continuation lines joined.
#[derive(Debug, Clone)]
pub struct Reply {
    pub code: u16,
    pub text: String,
}

/// Reads one CRLF- (or LF-) terminated line, without its terminator.
pub async fn read_line<R: AsyncBufRead + Unpin>(r: &mut R) -> Result<Vec<u8>, SmtpError> {
    let mut buf = Vec::new();
    let n = r.read_until(b'\n', &mut buf).await?;
    if n == 0 {
        return Err(SmtpError::Closed);
    }
    if buf.len() > MAX_LINE {
        return Err(SmtpError::LineTooLong);
    }
    while matches!(buf.last(), Some(b'\n') | Some(b'\r')) {
        buf.pop();
    }
    Ok(buf)
}

pub async fn write_line<W: AsyncWrite + Unpin>(w: &mut W, line: &str) -> Result<(), SmtpError> {
    w.write_all(line.as_bytes()).await?;
    w.write_all(b"\r\n").await?;
    w.flush().await?;
    Ok(())
}

/// Reads a reply, following `250-` continuations to the final line.
pub async fn read_reply<R: AsyncBufRead + Unpin>(r: &mut R) -> Result<Reply, SmtpError> {
    let mut texts: Vec<String> = Vec::new();
    loop {
        let raw = read_line(r).await?;
        let line = String::from_utf8_lossy(&raw).into_owned();
        if line.len() < 3 || !line.as_bytes()[..3].iter().all(u8::is_ascii_digit) {
            return Err(SmtpError::BadReply(line));
        }
        let code: u16 = line[..3].parse().map_err(|_| SmtpError::BadReply(line.clone()))?;
        let more = line.as_bytes().get(3) == Some(&b'-');
        let rest = if line.len() > 4 { &line[4..] } else { "" };
        texts.push(rest.to_string());
        if !more {
            return Ok(Reply {
                code,
                text: texts.join(" / "),
            });
        }
    }
}

async fn read_reply_timed<R: AsyncBufRead + Unpin>(r: &mut R) -> Result<Reply, SmtpError> {
    timeout(REPLY_TIMEOUT, read_reply(r))
        .await
        .map_err(|_| SmtpError::Timeout)?
}

/// The command subset the proxy speaks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Command {
    Helo(String),
    Ehlo(String),
    /// Inline `AUTH PLAIN <base64>`.
    AuthPlain(String),
    /// Reverse path from `MAIL FROM:<...>`, possibly empty.
    Mail(String),
    /// Forward path from `RCPT TO:<...>`.
    Rcpt(String),
    Data,
    Rset,
    Noop,
    Quit,
    Unknown(String),
}

/// Parses one command line; never fails, unknown verbs are passed up
/// so the session can answer 502.
pub fn parse_command(line: &str) -> Command {
    let line = line.trim();
    let upper = line.to_ascii_uppercase();
    let arg = |prefix: &str| line[prefix.len()..].trim().to_string();
    if upper.starts_with("HELO ") {
        return Command::Helo(arg("HELO "));
    }
    if upper.starts_with("EHLO ") {
        return Command::Ehlo(arg("EHLO "));
    }
    if let Some(rest) = upper.strip_prefix("AUTH PLAIN") {
        if rest.trim().is_empty() {
            // The two-step form is not supported; surface as unknown.
            return Command::Unknown(line.to_string());
        }
        return Command::AuthPlain(arg("AUTH PLAIN"));
    }
    if upper.starts_with("MAIL FROM:") {
        return Command::Mail(angle_path(&line["MAIL FROM:".len()..]));
    }
    if upper.starts_with("RCPT TO:") {
        return Command::Rcpt(angle_path(&line["RCPT TO:".len()..]));
    }
    match upper.as_str() {
        "DATA" => Command::Data,
        "RSET" => Command::Rset,
        "NOOP" => Command::Noop,
        "QUIT" => Command::Quit,
        _ => Command::Unknown(line.to_string()),
    }
}

/// Extracts the path from `<addr>`, tolerating a bare address.
fn angle_path(s: &str) -> String {
    let s = s.trim();
    match (s.find('<'), s.rfind('>')) {
        (Some(a), Some(b)) if a < b => s[a + 1..b].to_string(),
        _ => s.split_whitespace().next().unwrap_or("").to_string(),
    }
}

/// Reads a DATA payload up to the lone-dot terminator, un-stuffing
/// leading dots. Line terminators are preserved as received.
pub async fn read_data_body<R: AsyncBufRead + Unpin>(r: &mut R) -> Result<Vec<u8>, SmtpError> {
    let mut out: Vec<u8> = Vec::new();
    loop {
        let mut line = Vec::new();
        let n = r.read_until(b'\n', &mut line).await?;
        if n == 0 {
            return Err(SmtpError::Closed);
        }
        let stripped: &[u8] = line
            .strip_suffix(b"\r\n")
            .or_else(|| line.strip_suffix(b"\n"))
            .unwrap_or(&line);
        if stripped == b"." {
            return Ok(out);
        }
        let payload: &[u8] = if line.first() == Some(&b'.') {
            &line[1..]
        } else {
            &line
        };
        if out.len() + payload.len() > MAX_MESSAGE {
            return Err(SmtpError::MessageTooLarge);
        }
        out.extend_from_slice(payload);
    }
}

/// Writes a message as a DATA payload: dot-stuffed, CRLF line endings,
/// closed with the lone-dot terminator.
pub async fn write_data_body<W: AsyncWrite + Unpin>(
    w: &mut W,
    body: &[u8],
) -> Result<(), SmtpError> {
    for line in body.split_inclusive(|&b| b == b'\n') {
        let content = match line.strip_suffix(b"\r\n").or_else(|| line.strip_suffix(b"\n")) {
            Some(c) => c,
            None => line,
        };
        if content.first() == Some(&b'.') {
            w.write_all(b".").await?;
        }
        w.write_all(content).await?;
        w.write_all(b"\r\n").await?;
    }
    w.write_all(b".\r\n").await?;
    w.flush().await?;
    Ok(())
}

/// One outbound message.
#[derive(Debug, Clone)]
pub struct MailJob {
    /// Name announced in EHLO.
    pub helo: String,
    /// `(user, password)` for AUTH PLAIN, when submitting as a client.
    pub auth: Option<(String, String)>,
    pub mail_from: String,
    pub rcpts: Vec<String>,
    /// Full message bytes, headers and body.
    pub body: Vec<u8>,
}

/// Delivers one message over SMTP and returns the final DATA reply,
/// whatever its code. Refusals earlier in the dialogue surface as
/// `SmtpError::Refused` carrying the server's code.
pub async fn smtp_send(addr: &str, job: &MailJob) -> Result<Reply, SmtpError> {
    let stream = timeout(Duration::from_secs(10), TcpStream::connect(addr))
        .await
        .map_err(|_| SmtpError::Timeout)??;
    let (read_half, mut w) = stream.into_split();
    let mut r = BufReader::new(read_half);

    expect(&mut r, 220, "greeting").await?;
    write_line(&mut w, &format!("EHLO {}", job.helo)).await?;
    expect(&mut r, 250, "EHLO").await?;

    if let Some((user, pass)) = &job.auth {
        use base64::Engine;
        let payload =
            base64::engine::general_purpose::STANDARD.encode(format!("\0{user}\0{pass}"));
        write_line(&mut w, &format!("AUTH PLAIN {payload}")).await?;
        expect(&mut r, 235, "AUTH").await?;
    }

    write_line(&mut w, &format!("MAIL FROM:<{}>", job.mail_from)).await?;
    expect(&mut r, 250, "MAIL").await?;
    for rcpt in &job.rcpts {
        write_line(&mut w, &format!("RCPT TO:<{rcpt}>")).await?;
        expect(&mut r, 250, "RCPT").await?;
    }
    write_line(&mut w, "DATA").await?;
    expect(&mut r, 354, "DATA").await?;
    write_data_body(&mut w, &job.body).await?;
    let verdict = read_reply_timed(&mut r).await?;
    let _ = write_line(&mut w, "QUIT").await;
    Ok(verdict)
}

async fn expect<R: AsyncBufRead + Unpin>(
    r: &mut R,
    code: u16,
    phase: &'static str,
) -> Result<Reply, SmtpError> {
    let reply = read_reply_timed(r).await?;
    if reply.code != code {
        return Err(SmtpError::Refused {
            phase,
            code: reply.code,
            text: reply.text,
        });
    }
    Ok(reply)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn commands_parse() {
        assert_eq!(parse_command("EHLO a.example"), Command::Ehlo("a.example".into()));
        assert_eq!(parse_command("helo box"), Command::Helo("box".into()));
        assert_eq!(
            parse_command("MAIL FROM:<alice@a.example>"),
            Command::Mail("alice@a.example".into())
        );
        assert_eq!(parse_command("mail from:<>"), Command::Mail(String::new()));
        assert_eq!(
            parse_command("RCPT TO:<bob@b.example>"),
            Command::Rcpt("bob@b.example".into())
        );
        assert_eq!(parse_command("DATA"), Command::Data);
        assert_eq!(parse_command("quit"), Command::Quit);
        assert_eq!(
            parse_command("AUTH PLAIN AGFsaWNlAHB3"),
            Command::AuthPlain("AGFsaWNlAHB3".into())
        );
        assert!(matches!(parse_command("VRFY alice"), Command::Unknown(_)));
    }

    #[tokio::test]
    async fn data_body_round_trips_dot_stuffing() {
        let original = b".leading dot\r\nplain\r\n..two dots\r\n";
        let mut wire = Vec::new();
        write_data_body(&mut wire, original).await.unwrap();
        assert!(wire.starts_with(b"..leading dot\r\n"));
        assert!(wire.ends_with(b".\r\n"));

        let mut reader = BufReader::new(&wire[..]);
        let back = read_data_body(&mut reader).await.unwrap();
        assert_eq!(back, original);
    }

    #[tokio::test]
    async fn replies_parse_continuations() {
        let wire = b"250-a.example greets\r\n250 AUTH PLAIN\r\n";
        let mut r = BufReader::new(&wire[..]);
        let reply = read_reply(&mut r).await.unwrap();
        assert_eq!(reply.code, 250);
        assert!(reply.text.contains("AUTH PLAIN"));
    }
}
