//! Minimal DNS wire codec: enough to read A/CNAME/PTR records out of UDP
//! payloads, follow CNAME chains inside a single response, and synthesize
//! well-formed responses/queries for the pcap writer and the PTR client.

use std::collections::{BTreeMap, BTreeSet};
use std::net::Ipv4Addr;

pub const TYPE_A: u16 = 1;
pub const TYPE_CNAME: u16 = 5;
pub const TYPE_PTR: u16 = 12;
pub const CLASS_IN: u16 = 1;

#[derive(Debug, thiserror::Error)]
pub enum DnsError {
    #[error("truncated message at offset {0}")]
    Truncated(usize),
    #[error("name compression loop")]
    CompressionLoop,
    #[error("name too long")]
    NameTooLong,
    #[error("message has no question")]
    NoQuestion,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RData {
    A(Ipv4Addr),
    Cname(String),
    Ptr(String),
    Other(u16),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnswerRecord {
    pub owner: String,
    pub rdata: RData,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub id: u16,
    pub is_response: bool,
    pub questions: Vec<String>,
    pub answers: Vec<AnswerRecord>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn u8(&mut self) -> Result<u8, DnsError> {
        let b = *self.buf.get(self.pos).ok_or(DnsError::Truncated(self.pos))?;
        self.pos += 1;
        Ok(b)
    }

    fn u16(&mut self) -> Result<u16, DnsError> {
        Ok(u16::from_be_bytes([self.u8()?, self.u8()?]))
    }

    fn u32(&mut self) -> Result<u32, DnsError> {
        Ok(u32::from_be_bytes([self.u8()?, self.u8()?, self.u8()?, self.u8()?]))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], DnsError> {
        let end = self.pos.checked_add(n).ok_or(DnsError::Truncated(self.pos))?;
        let s = self.buf.get(self.pos..end).ok_or(DnsError::Truncated(self.pos))?;
        self.pos = end;
        Ok(s)
    }
}

/// Reads a (possibly compressed) domain name starting at `reader.pos`,
/// leaving the reader just past the name. Returns the lowercase dotted name
/// without a trailing dot.
fn read_name(reader: &mut Reader<'_>) -> Result<String, DnsError> {
    let mut labels: Vec<String> = Vec::new();
    let mut jumps = 0usize;
    let mut pos = reader.pos;
    let mut end_after_first_jump: Option<usize> = None;

    loop {
        let len = *reader.buf.get(pos).ok_or(DnsError::Truncated(pos))? as usize;
        if len & 0xC0 == 0xC0 {
            let lo = *reader.buf.get(pos + 1).ok_or(DnsError::Truncated(pos + 1))? as usize;
            if end_after_first_jump.is_none() {
                end_after_first_jump = Some(pos + 2);
            }
            pos = ((len & 0x3F) << 8) | lo;
            jumps += 1;
            if jumps > 64 {
                return Err(DnsError::CompressionLoop);
            }
        } else if len == 0 {
            if end_after_first_jump.is_none() {
                end_after_first_jump = Some(pos + 1);
            }
            break;
        } else if len > 63 {
            return Err(DnsError::Truncated(pos));
        } else {
            let start = pos + 1;
            let bytes = reader
                .buf
                .get(start..start + len)
                .ok_or(DnsError::Truncated(start))?;
            labels.push(String::from_utf8_lossy(bytes).to_lowercase());
            pos = start + len;
        }
        if labels.iter().map(|l| l.len() + 1).sum::<usize>() > 255 {
            return Err(DnsError::NameTooLong);
        }
    }

    reader.pos = end_after_first_jump.unwrap_or(pos);
    Ok(labels.join("."))
}

/// Parses a DNS message (header, questions, answer section). Authority and
/// additional sections are left unread; they are not needed here.
pub fn parse_message(payload: &[u8]) -> Result<Message, DnsError> {
    let mut r = Reader::new(payload);
    let id = r.u16()?;
    let flags = r.u16()?;
    let qdcount = r.u16()?;
    let ancount = r.u16()?;
    let _nscount = r.u16()?;
    let _arcount = r.u16()?;

    let mut questions = Vec::with_capacity(qdcount as usize);
    for _ in 0..qdcount {
        let name = read_name(&mut r)?;
        let _qtype = r.u16()?;
        let _qclass = r.u16()?;
        questions.push(name);
    }

    let mut answers = Vec::with_capacity(ancount as usize);
    for _ in 0..ancount {
        let owner = read_name(&mut r)?;
        let rtype = r.u16()?;
        let class = r.u16()?;
        let _ttl = r.u32()?;
        let rdlen = r.u16()? as usize;
        let rdata_start = r.pos;
        let rdata = r.take(rdlen)?;
        let parsed = match (rtype, class) {
            (TYPE_A, CLASS_IN) if rdlen == 4 => {
                RData::A(Ipv4Addr::new(rdata[0], rdata[1], rdata[2], rdata[3]))
            }
            (TYPE_CNAME, CLASS_IN) | (TYPE_PTR, CLASS_IN) => {
                let mut sub = Reader::new(payload);
                sub.pos = rdata_start;
                let name = read_name(&mut sub)?;
                if rtype == TYPE_CNAME {
                    RData::Cname(name)
                } else {
                    RData::Ptr(name)
                }
            }
            _ => RData::Other(rtype),
        };
        answers.push(AnswerRecord { owner, rdata: parsed });
    }

    Ok(Message {
        id,
        is_response: flags & 0x8000 != 0,
        questions,
        answers,
    })
}

/// Resolves a response to `(query_name, A records)` with CNAME chains inside
/// the response followed back to the original question. Returns `None` for
/// queries and for responses that carry no A record reachable from the
/// question.
pub fn response_addresses(payload: &[u8]) -> Result<Option<(String, BTreeSet<Ipv4Addr>)>, DnsError> {
    let msg = parse_message(payload)?;
    if !msg.is_response {
        return Ok(None);
    }
    let query = msg.questions.first().ok_or(DnsError::NoQuestion)?.clone();

    let mut aliases: BTreeMap<String, String> = BTreeMap::new();
    let mut addresses: BTreeMap<String, BTreeSet<Ipv4Addr>> = BTreeMap::new();
    for rec in &msg.answers {
        match &rec.rdata {
            RData::A(ip) => {
                addresses.entry(rec.owner.clone()).or_default().insert(*ip);
            }
            RData::Cname(target) => {
                aliases.entry(rec.owner.clone()).or_insert_with(|| target.clone());
            }
            _ => {}
        }
    }

    let mut collected = BTreeSet::new();
    let mut visited = BTreeSet::new();
    let mut name = query.clone();
    loop {
        if !visited.insert(name.clone()) {
            break; // alias cycle; keep whatever was gathered so far
        }
        if let Some(addrs) = addresses.get(&name) {
            collected.extend(addrs.iter().copied());
        }
        match aliases.get(&name) {
            Some(next) => name = next.clone(),
            None => break,
        }
    }

    if collected.is_empty() {
        Ok(None)
    } else {
        Ok(Some((query, collected)))
    }
}

pub fn encode_name(name: &str, out: &mut Vec<u8>) {
    for label in name.split('.').filter(|l| !l.is_empty()) {
        let bytes = label.as_bytes();
        let len = bytes.len().min(63);
        out.push(len as u8);
        out.extend_from_slice(&bytes[..len]);
    }
    out.push(0);
}

/// Builds an A-record response for `query` answering with `answers`,
/// matching what a recursive resolver would return. Used when emitting pcap
/// bytes so the cleartext-DNS side channel survives a write/parse cycle.
pub fn build_response(id: u16, query: &str, answers: &BTreeSet<Ipv4Addr>) -> Vec<u8> {
    let mut out = Vec::with_capacity(64);
    out.extend_from_slice(&id.to_be_bytes());
    out.extend_from_slice(&0x8180u16.to_be_bytes()); // response, RD+RA
    out.extend_from_slice(&1u16.to_be_bytes());
    out.extend_from_slice(&(answers.len() as u16).to_be_bytes());
    out.extend_from_slice(&0u16.to_be_bytes());
    out.extend_from_slice(&0u16.to_be_bytes());
    encode_name(query, &mut out);
    out.extend_from_slice(&TYPE_A.to_be_bytes());
    out.extend_from_slice(&CLASS_IN.to_be_bytes());
    for ip in answers {
        out.extend_from_slice(&[0xC0, 0x0C]); // pointer to the question name
        out.extend_from_slice(&TYPE_A.to_be_bytes());
        out.extend_from_slice(&CLASS_IN.to_be_bytes());
        out.extend_from_slice(&300u32.to_be_bytes());
        out.extend_from_slice(&4u16.to_be_bytes());
        out.extend_from_slice(&ip.octets());
    }
    out
}

/// Size in bytes of the message `build_response` would produce.
pub fn response_len(query: &str, answer_count: usize) -> usize {
    let qname = query.split('.').filter(|l| !l.is_empty()).map(|l| 1 + l.len().min(63)).sum::<usize>() + 1;
    12 + qname + 4 + answer_count * 16
}

/// Builds a recursive PTR query for the reverse name of `ip`.
pub fn build_ptr_query(id: u16, ip: Ipv4Addr) -> Vec<u8> {
    let o = ip.octets();
    let name = format!("{}.{}.{}.{}.in-addr.arpa", o[3], o[2], o[1], o[0]);
    let mut out = Vec::with_capacity(48);
    out.extend_from_slice(&id.to_be_bytes());
    out.extend_from_slice(&0x0100u16.to_be_bytes()); // RD
    out.extend_from_slice(&1u16.to_be_bytes());
    out.extend_from_slice(&0u16.to_be_bytes());
    out.extend_from_slice(&0u16.to_be_bytes());
    out.extend_from_slice(&0u16.to_be_bytes());
    encode_name(&name, &mut out);
    out.extend_from_slice(&TYPE_PTR.to_be_bytes());
    out.extend_from_slice(&CLASS_IN.to_be_bytes());
    out
}

/// First PTR name in a response, if any.
pub fn ptr_name(payload: &[u8]) -> Result<Option<String>, DnsError> {
    let msg = parse_message(payload)?;
    if !msg.is_response {
        return Ok(None);
    }
    Ok(msg.answers.into_iter().find_map(|r| match r.rdata {
        RData::Ptr(name) => Some(name),
        _ => None,
    }))
}
