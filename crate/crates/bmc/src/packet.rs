//! Synthetic frame format and trace files.
//!
//! Frames are `[eth 14][ipv4 20][udp 8][cache-udp frame header 8][payload]`.
//! Multi-byte header fields are little-endian — the workload generator,
//! the extension, and the reply encoder all agree on that, which is what
//! matters for a self-contained synthetic format. Payloads follow the
//! memcached UDP text protocol (`get <key>\r\n`, `set <key> <flags>
//! <exptime> <bytes>\r\n<data>\r\n`).

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

pub const ETH_LEN: usize = 14;
pub const IP_OFF: usize = 14;
pub const IP_LEN: usize = 20;
pub const UDP_OFF: usize = 34;
pub const UDP_LEN: usize = 8;
pub const FRAME_HDR_OFF: usize = 42;
pub const FRAME_HDR_LEN: usize = 8;
pub const PAYLOAD_OFF: usize = 50;

pub const ETHERTYPE_IPV4: u16 = 0x0800;
pub const IPPROTO_UDP: u8 = 17;
pub const MEMCACHED_PORT: u16 = 11211;

pub const CLIENT_MAC: [u8; 6] = [0x02, 0, 0, 0, 0, 0x02];
pub const SERVER_MAC: [u8; 6] = [0x02, 0, 0, 0, 0, 0x01];
pub const CLIENT_IP: u32 = 0x0a00_0002;
pub const SERVER_IP: u32 = 0x0a00_0001;
pub const CLIENT_PORT: u16 = 40000;

/// Longest key the cache handles.
pub const MAX_KEY_LEN: usize = 250;

fn put_u16(buf: &mut [u8], at: usize, v: u16) {
    buf[at..at + 2].copy_from_slice(&v.to_le_bytes());
}

fn put_u32(buf: &mut [u8], at: usize, v: u32) {
    buf[at..at + 4].copy_from_slice(&v.to_le_bytes());
}

/// Builds a full frame around `payload`, client → server.
pub fn build_request_frame(request_id: u16, payload: &[u8]) -> Vec<u8> {
    let mut frame = vec![0u8; PAYLOAD_OFF + payload.len()];
    frame[0..6].copy_from_slice(&SERVER_MAC);
    frame[6..12].copy_from_slice(&CLIENT_MAC);
    put_u16(&mut frame, 12, ETHERTYPE_IPV4);

    let udp_total = (UDP_LEN + FRAME_HDR_LEN + payload.len()) as u16;
    frame[IP_OFF] = 0x45; // version 4, ihl 5
    put_u16(&mut frame, IP_OFF + 2, IP_LEN as u16 + udp_total);
    frame[IP_OFF + 8] = 64; // ttl
    frame[IP_OFF + 9] = IPPROTO_UDP;
    put_u32(&mut frame, IP_OFF + 12, CLIENT_IP);
    put_u32(&mut frame, IP_OFF + 16, SERVER_IP);

    put_u16(&mut frame, UDP_OFF, CLIENT_PORT);
    put_u16(&mut frame, UDP_OFF + 2, MEMCACHED_PORT);
    put_u16(&mut frame, UDP_OFF + 4, udp_total);

    put_u16(&mut frame, FRAME_HDR_OFF, request_id);
    put_u16(&mut frame, FRAME_HDR_OFF + 2, 0); // sequence
    put_u16(&mut frame, FRAME_HDR_OFF + 4, 1); // total datagrams

    frame[PAYLOAD_OFF..].copy_from_slice(payload);
    frame
}

pub fn build_get_packet(request_id: u16, key: &[u8]) -> Vec<u8> {
    let mut payload = Vec::with_capacity(6 + key.len());
    payload.extend_from_slice(b"get ");
    payload.extend_from_slice(key);
    payload.extend_from_slice(b"\r\n");
    build_request_frame(request_id, &payload)
}

pub fn build_set_packet(request_id: u16, key: &[u8], flags: u32, data: &[u8]) -> Vec<u8> {
    let mut payload = Vec::new();
    payload.extend_from_slice(b"set ");
    payload.extend_from_slice(key);
    payload.extend_from_slice(format!(" {flags} 0 {}\r\n", data.len()).as_bytes());
    payload.extend_from_slice(data);
    payload.extend_from_slice(b"\r\n");
    build_request_frame(request_id, &payload)
}

/// The preformatted reply payload a hit serves:
/// `VALUE <key> <flags> <bytes>\r\n<data>\r\nEND\r\n`.
pub fn encode_value_reply(key: &[u8], flags: u32, data: &[u8]) -> Vec<u8> {
    let mut reply = Vec::with_capacity(key.len() + data.len() + 32);
    reply.extend_from_slice(b"VALUE ");
    reply.extend_from_slice(key);
    reply.extend_from_slice(format!(" {flags} {}\r\n", data.len()).as_bytes());
    reply.extend_from_slice(data);
    reply.extend_from_slice(b"\r\nEND\r\n");
    reply
}

/// The full reply frame a cache hit rewrites the request into: addresses
/// swapped, request id echoed, lengths fixed up, checksum cleared.
pub fn expected_reply_frame(request_frame: &[u8], reply_payload: &[u8]) -> Vec<u8> {
    let mut frame = vec![0u8; PAYLOAD_OFF + reply_payload.len()];
    frame[0..6].copy_from_slice(&request_frame[6..12]);
    frame[6..12].copy_from_slice(&request_frame[0..6]);
    put_u16(&mut frame, 12, ETHERTYPE_IPV4);

    let udp_total = (UDP_LEN + FRAME_HDR_LEN + reply_payload.len()) as u16;
    frame[IP_OFF] = 0x45;
    put_u16(&mut frame, IP_OFF + 2, IP_LEN as u16 + udp_total);
    frame[IP_OFF + 8] = 64;
    frame[IP_OFF + 9] = IPPROTO_UDP;
    frame[IP_OFF + 12..IP_OFF + 16].copy_from_slice(&request_frame[IP_OFF + 16..IP_OFF + 20]);
    frame[IP_OFF + 16..IP_OFF + 20].copy_from_slice(&request_frame[IP_OFF + 12..IP_OFF + 16]);

    frame[UDP_OFF..UDP_OFF + 2].copy_from_slice(&request_frame[UDP_OFF + 2..UDP_OFF + 4]);
    frame[UDP_OFF + 2..UDP_OFF + 4].copy_from_slice(&request_frame[UDP_OFF..UDP_OFF + 2]);
    put_u16(&mut frame, UDP_OFF + 4, udp_total);

    // Only the request id is echoed in the frame header.
    frame[FRAME_HDR_OFF..FRAME_HDR_OFF + 2]
        .copy_from_slice(&request_frame[FRAME_HDR_OFF..FRAME_HDR_OFF + 2]);
    put_u16(&mut frame, FRAME_HDR_OFF + 4, 1);

    frame[PAYLOAD_OFF..].copy_from_slice(reply_payload);
    frame
}

/// Trace-file IO error.
#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace io: {0}")]
    Io(#[from] std::io::Error),
    #[error("truncated frame header at offset {0}")]
    TruncatedHeader(u64),
    #[error("truncated frame body at offset {0}")]
    TruncatedBody(u64),
}

/// Writes length-prefixed frames (u32 little-endian length, then bytes) to
/// a flat file.
pub fn write_trace(path: impl AsRef<Path>, frames: &[Vec<u8>]) -> Result<(), TraceError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for frame in frames {
        out.write_all(&(frame.len() as u32).to_le_bytes())?;
        out.write_all(frame)?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a trace written by [`write_trace`].
pub fn read_trace(path: impl AsRef<Path>) -> Result<Vec<Vec<u8>>, TraceError> {
    let mut input = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut frames = Vec::new();
    let mut offset = 0u64;
    loop {
        let mut len_buf = [0u8; 4];
        match input.read_exact(&mut len_buf) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => {
                return if offset == 0 {
                    Err(TraceError::Io(e))
                } else {
                    Err(TraceError::TruncatedHeader(offset))
                }
            }
        }
        let len = u32::from_le_bytes(len_buf) as usize;
        let mut frame = vec![0u8; len];
        input
            .read_exact(&mut frame)
            .map_err(|_| TraceError::TruncatedBody(offset))?;
        offset += 4 + len as u64;
        frames.push(frame);
    }
    Ok(frames)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn get_packet_shape() {
        let frame = build_get_packet(7, b"hello");
        assert_eq!(frame.len(), PAYLOAD_OFF + 11);
        assert_eq!(&frame[PAYLOAD_OFF..], b"get hello\r\n");
        assert_eq!(
            u16::from_le_bytes([frame[UDP_OFF + 2], frame[UDP_OFF + 3]]),
            MEMCACHED_PORT
        );
        assert_eq!(
            u16::from_le_bytes([frame[FRAME_HDR_OFF], frame[FRAME_HDR_OFF + 1]]),
            7
        );
        let udp_len = u16::from_le_bytes([frame[UDP_OFF + 4], frame[UDP_OFF + 5]]);
        assert_eq!(udp_len as usize, UDP_LEN + FRAME_HDR_LEN + 11);
    }

    #[test]
    fn value_reply_is_text_protocol() {
        let reply = encode_value_reply(b"k", 3, b"abc");
        assert_eq!(reply, b"VALUE k 3 3\r\nabc\r\nEND\r\n");
    }

    #[test]
    fn trace_round_trips() {
        let dir = std::env::temp_dir().join(format!("trace-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.bin");
        let frames = vec![build_get_packet(1, b"a"), build_set_packet(2, b"b", 0, b"xy")];
        write_trace(&path, &frames).unwrap();
        assert_eq!(read_trace(&path).unwrap(), frames);
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
