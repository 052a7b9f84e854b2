//! CoAP message model and the datagram wire format.

use std::fmt;

use super::CoapError;

const VERSION: u8 = 1;
const PAYLOAD_MARKER: u8 = 0xFF;
/// Largest delta or length representable with the 14 extended nibble.
const MAX_EXTENDED: usize = 269 + 0xFFFF;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MessageType {
    Con = 0,
    Non = 1,
    Ack = 2,
    Rst = 3,
}

impl MessageType {
    fn from_bits(bits: u8) -> MessageType {
        match bits & 0x03 {
            0 => MessageType::Con,
            1 => MessageType::Non,
            2 => MessageType::Ack,
            _ => MessageType::Rst,
        }
    }
}

/// Method or response code, printed as `c.dd`.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Code {
    pub class: u8,
    pub detail: u8,
}

impl Code {
    pub const EMPTY: Code = Code::new(0, 0);
    pub const GET: Code = Code::new(0, 1);
    pub const POST: Code = Code::new(0, 2);
    pub const PUT: Code = Code::new(0, 3);
    pub const DELETE: Code = Code::new(0, 4);

    pub const CREATED: Code = Code::new(2, 1);
    pub const DELETED: Code = Code::new(2, 2);
    pub const VALID: Code = Code::new(2, 3);
    pub const CHANGED: Code = Code::new(2, 4);
    pub const CONTENT: Code = Code::new(2, 5);
    pub const CONTINUE: Code = Code::new(2, 31);

    pub const BAD_REQUEST: Code = Code::new(4, 0);
    pub const UNAUTHORIZED: Code = Code::new(4, 1);
    pub const BAD_OPTION: Code = Code::new(4, 2);
    pub const FORBIDDEN: Code = Code::new(4, 3);
    pub const NOT_FOUND: Code = Code::new(4, 4);
    pub const METHOD_NOT_ALLOWED: Code = Code::new(4, 5);
    pub const NOT_ACCEPTABLE: Code = Code::new(4, 6);
    pub const REQUEST_ENTITY_INCOMPLETE: Code = Code::new(4, 8);
    pub const REQUEST_ENTITY_TOO_LARGE: Code = Code::new(4, 13);
    pub const UNSUPPORTED_CONTENT_FORMAT: Code = Code::new(4, 15);

    pub const INTERNAL_SERVER_ERROR: Code = Code::new(5, 0);
    pub const SERVICE_UNAVAILABLE: Code = Code::new(5, 3);

    pub const fn new(class: u8, detail: u8) -> Code {
        Code { class, detail }
    }

    pub fn from_byte(b: u8) -> Code {
        Code::new(b >> 5, b & 0x1F)
    }

    pub fn to_byte(self) -> u8 {
        (self.class << 5) | (self.detail & 0x1F)
    }

    pub fn is_empty(self) -> bool {
        self == Code::EMPTY
    }

    pub fn is_request(self) -> bool {
        self.class == 0 && self.detail != 0
    }

    pub fn is_response(self) -> bool {
        (2..=5).contains(&self.class)
    }

    pub fn is_success(self) -> bool {
        self.class == 2
    }
}

impl fmt::Display for Code {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:02}", self.class, self.detail)
    }
}

impl fmt::Debug for Code {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

/// Registered option numbers used by this stack.
pub mod option {
    pub const IF_MATCH: u16 = 1;
    pub const URI_HOST: u16 = 3;
    pub const ETAG: u16 = 4;
    pub const OBSERVE: u16 = 6;
    pub const URI_PORT: u16 = 7;
    pub const LOCATION_PATH: u16 = 8;
    pub const URI_PATH: u16 = 11;
    pub const CONTENT_FORMAT: u16 = 12;
    pub const MAX_AGE: u16 = 14;
    pub const URI_QUERY: u16 = 15;
    pub const ACCEPT: u16 = 17;
    pub const LOCATION_QUERY: u16 = 20;
    pub const BLOCK2: u16 = 23;
    pub const BLOCK1: u16 = 27;
    pub const SIZE2: u16 = 28;
    pub const SIZE1: u16 = 60;
}

/// Content-Format identifiers.
pub mod content_format {
    pub const TEXT_PLAIN: u16 = 0;
    pub const LINK_FORMAT: u16 = 40;
    pub const OCTET_STREAM: u16 = 42;
    pub const SENML_JSON: u16 = 110;
    pub const SENML_CBOR: u16 = 112;
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CoapOption {
    pub number: u16,
    pub value: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CoapMessage {
    pub msg_type: MessageType,
    pub code: Code,
    pub message_id: u16,
    pub token: Vec<u8>,
    pub options: Vec<CoapOption>,
    pub payload: Vec<u8>,
}

impl CoapMessage {
    pub fn new(msg_type: MessageType, code: Code) -> CoapMessage {
        CoapMessage {
            msg_type,
            code,
            message_id: 0,
            token: Vec::new(),
            options: Vec::new(),
            payload: Vec::new(),
        }
    }

    pub fn request(code: Code, path: &str) -> CoapMessage {
        let mut msg = CoapMessage::new(MessageType::Con, code);
        msg.set_uri_path(path);
        msg
    }

    /// Empty ACK for a confirmable message.
    pub fn empty_ack(message_id: u16) -> CoapMessage {
        let mut msg = CoapMessage::new(MessageType::Ack, Code::EMPTY);
        msg.message_id = message_id;
        msg
    }

    pub fn reset(message_id: u16) -> CoapMessage {
        let mut msg = CoapMessage::new(MessageType::Rst, Code::EMPTY);
        msg.message_id = message_id;
        msg
    }

    /// A response skeleton carrying the request's token. The caller (or the
    /// endpoint) decides between piggybacked and separate delivery.
    pub fn response_to(request: &CoapMessage, code: Code) -> CoapMessage {
        let mut msg = CoapMessage::new(MessageType::Ack, code);
        msg.message_id = request.message_id;
        msg.token = request.token.clone();
        msg
    }

    pub fn with_payload(mut self, payload: Vec<u8>) -> CoapMessage {
        self.payload = payload;
        self
    }

    pub fn add_option(&mut self, number: u16, value: Vec<u8>) {
        // keep options ordered; repeated numbers retain insertion order
        let at = self.options.partition_point(|o| o.number <= number);
        self.options.insert(at, CoapOption { number, value });
    }

    pub fn set_option(&mut self, number: u16, value: Vec<u8>) {
        self.remove_option(number);
        self.add_option(number, value);
    }

    pub fn set_uint_option(&mut self, number: u16, value: u32) {
        self.set_option(number, encode_uint(value));
    }

    pub fn remove_option(&mut self, number: u16) {
        self.options.retain(|o| o.number != number);
    }

    pub fn option(&self, number: u16) -> Option<&[u8]> {
        self.options
            .iter()
            .find(|o| o.number == number)
            .map(|o| o.value.as_slice())
    }

    pub fn options_of(&self, number: u16) -> impl Iterator<Item = &[u8]> {
        self.options
            .iter()
            .filter(move |o| o.number == number)
            .map(|o| o.value.as_slice())
    }

    pub fn uint_option(&self, number: u16) -> Option<u32> {
        self.option(number).map(decode_uint)
    }

    pub fn set_uri_path(&mut self, path: &str) {
        self.remove_option(option::URI_PATH);
        for seg in path.split('/').filter(|s| !s.is_empty()) {
            self.add_option(option::URI_PATH, seg.as_bytes().to_vec());
        }
    }

    /// Uri-Path joined with a leading slash, `/` when absent.
    pub fn uri_path(&self) -> String {
        let mut out = String::new();
        for seg in self.options_of(option::URI_PATH) {
            out.push('/');
            out.push_str(&String::from_utf8_lossy(seg));
        }
        if out.is_empty() {
            out.push('/');
        }
        out
    }

    pub fn add_uri_query(&mut self, key: &str, value: &str) {
        self.add_option(option::URI_QUERY, format!("{key}={value}").into_bytes());
    }

    pub fn uri_queries(&self) -> Vec<(String, String)> {
        self.options_of(option::URI_QUERY)
            .map(|q| {
                let q = String::from_utf8_lossy(q);
                match q.split_once('=') {
                    Some((k, v)) => (k.to_string(), v.to_string()),
                    None => (q.to_string(), String::new()),
                }
            })
            .collect()
    }

    pub fn location_path(&self) -> String {
        let mut out = String::new();
        for seg in self.options_of(option::LOCATION_PATH) {
            out.push('/');
            out.push_str(&String::from_utf8_lossy(seg));
        }
        out
    }

    pub fn set_location_path(&mut self, path: &str) {
        self.remove_option(option::LOCATION_PATH);
        for seg in path.split('/').filter(|s| !s.is_empty()) {
            self.add_option(option::LOCATION_PATH, seg.as_bytes().to_vec());
        }
    }

    pub fn content_format(&self) -> Option<u16> {
        self.uint_option(option::CONTENT_FORMAT).map(|v| v as u16)
    }

    pub fn set_content_format(&mut self, format: u16) {
        self.set_uint_option(option::CONTENT_FORMAT, format as u32);
    }

    pub fn observe(&self) -> Option<u32> {
        self.uint_option(option::OBSERVE)
    }

    pub fn encode(&self) -> Result<Vec<u8>, CoapError> {
        encode(self)
    }

    pub fn decode(bytes: &[u8]) -> Result<CoapMessage, CoapError> {
        decode(bytes)
    }
}

/// Minimal big-endian unsigned encoding (zero is the empty string).
pub fn encode_uint(value: u32) -> Vec<u8> {
    let bytes = value.to_be_bytes();
    let skip = bytes.iter().take_while(|b| **b == 0).count();
    bytes[skip..].to_vec()
}

pub fn decode_uint(bytes: &[u8]) -> u32 {
    bytes
        .iter()
        .rev()
        .take(4)
        .rev()
        .fold(0u32, |acc, b| (acc << 8) | *b as u32)
}

fn nibble(value: usize) -> Result<(u8, Vec<u8>), CoapError> {
    match value {
        0..=12 => Ok((value as u8, Vec::new())),
        13..=268 => Ok((13, vec![(value - 13) as u8])),
        269..=MAX_EXTENDED => Ok((14, ((value - 269) as u16).to_be_bytes().to_vec())),
        _ => Err(CoapError::OptionTooLarge(value)),
    }
}

pub fn encode(msg: &CoapMessage) -> Result<Vec<u8>, CoapError> {
    if msg.token.len() > 8 {
        return Err(CoapError::TokenTooLong(msg.token.len()));
    }
    let mut out = Vec::with_capacity(4 + msg.token.len() + msg.payload.len() + 16);
    out.push((VERSION << 6) | ((msg.msg_type as u8) << 4) | msg.token.len() as u8);
    out.push(msg.code.to_byte());
    out.extend_from_slice(&msg.message_id.to_be_bytes());
    out.extend_from_slice(&msg.token);

    let mut sorted: Vec<&CoapOption> = msg.options.iter().collect();
    sorted.sort_by_key(|o| o.number);
    let mut last = 0u16;
    for opt in sorted {
        let (dn, dext) = nibble((opt.number - last) as usize)?;
        let (ln, lext) = nibble(opt.value.len())?;
        out.push((dn << 4) | ln);
        out.extend_from_slice(&dext);
        out.extend_from_slice(&lext);
        out.extend_from_slice(&opt.value);
        last = opt.number;
    }
    if !msg.payload.is_empty() {
        out.push(PAYLOAD_MARKER);
        out.extend_from_slice(&msg.payload);
    }
    Ok(out)
}

fn read_extended(nib: u8, bytes: &[u8], pos: &mut usize) -> Result<usize, CoapError> {
    match nib {
        0..=12 => Ok(nib as usize),
        13 => {
            let b = *bytes.get(*pos).ok_or(CoapError::Truncated)?;
            *pos += 1;
            Ok(b as usize + 13)
        }
        14 => {
            let hi = *bytes.get(*pos).ok_or(CoapError::Truncated)?;
            let lo = *bytes.get(*pos + 1).ok_or(CoapError::Truncated)?;
            *pos += 2;
            Ok(u16::from_be_bytes([hi, lo]) as usize + 269)
        }
        _ => Err(CoapError::ReservedNibble),
    }
}

pub fn decode(bytes: &[u8]) -> Result<CoapMessage, CoapError> {
    if bytes.len() < 4 {
        return Err(CoapError::Truncated);
    }
    let version = bytes[0] >> 6;
    if version != VERSION {
        return Err(CoapError::BadVersion(version));
    }
    let msg_type = MessageType::from_bits(bytes[0] >> 4);
    let tkl = (bytes[0] & 0x0F) as usize;
    if tkl > 8 {
        return Err(CoapError::TokenTooLong(tkl));
    }
    let code = Code::from_byte(bytes[1]);
    let message_id = u16::from_be_bytes([bytes[2], bytes[3]]);
    let mut pos = 4;
    let token = bytes
        .get(pos..pos + tkl)
        .ok_or(CoapError::Truncated)?
        .to_vec();
    pos += tkl;

    let mut options = Vec::new();
    let mut number = 0usize;
    let mut payload = Vec::new();
    while pos < bytes.len() {
        let head = bytes[pos];
        pos += 1;
        if head == PAYLOAD_MARKER {
            if pos == bytes.len() {
                return Err(CoapError::EmptyPayloadAfterMarker);
            }
            payload = bytes[pos..].to_vec();
            break;
        }
        let delta = read_extended(head >> 4, bytes, &mut pos)?;
        let len = read_extended(head & 0x0F, bytes, &mut pos)?;
        number += delta;
        if number > u16::MAX as usize {
            return Err(CoapError::OptionOverrun);
        }
        let value = bytes
            .get(pos..pos + len)
            .ok_or(CoapError::OptionOverrun)?
            .to_vec();
        pos += len;
        options.push(CoapOption {
            number: number as u16,
            value,
        });
    }
    Ok(CoapMessage {
        msg_type,
        code,
        message_id,
        token,
        options,
        payload,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn con_get_header_only() {
        let mut msg = CoapMessage::new(MessageType::Con, Code::GET);
        msg.message_id = 0x1234;
        assert_eq!(encode(&msg).unwrap(), vec![0x40, 0x01, 0x12, 0x34]);
        assert_eq!(decode(&[0x40, 0x01, 0x12, 0x34]).unwrap(), msg);
    }

    #[test]
    fn piggybacked_content_with_token() {
        let mut msg = CoapMessage::new(MessageType::Ack, Code::CONTENT);
        msg.message_id = 1;
        msg.token = vec![0xC3];
        msg.payload = b"ok".to_vec();
        assert_eq!(
            encode(&msg).unwrap(),
            vec![0x61, 0x45, 0x00, 0x01, 0xC3, 0xFF, 0x6F, 0x6B]
        );
    }

    #[test]
    fn decode_errors() {
        assert_eq!(decode(&[]), Err(CoapError::Truncated));
        assert_eq!(decode(&[0x40, 0x01, 0x12]), Err(CoapError::Truncated));
        assert_eq!(decode(&[0x80, 0x01, 0, 0]), Err(CoapError::BadVersion(2)));
        // token length 2 but only 1 byte present
        assert_eq!(decode(&[0x42, 0x01, 0, 0, 0xAA]), Err(CoapError::Truncated));
        // option of length 5 with two bytes left
        assert_eq!(
            decode(&[0x40, 0x01, 0, 0, 0xB5, b'a', b'b']),
            Err(CoapError::OptionOverrun)
        );
        assert_eq!(
            decode(&[0x40, 0x01, 0, 0, 0xF0]),
            Err(CoapError::ReservedNibble)
        );
        assert_eq!(
            decode(&[0x40, 0x01, 0, 0, 0xFF]),
            Err(CoapError::EmptyPayloadAfterMarker)
        );
    }

    #[test]
    fn encode_errors() {
        let mut msg = CoapMessage::new(MessageType::Con, Code::GET);
        msg.token = vec![0; 9];
        assert_eq!(encode(&msg), Err(CoapError::TokenTooLong(9)));

        let mut msg = CoapMessage::new(MessageType::Con, Code::PUT);
        msg.add_option(option::URI_PATH, vec![0; MAX_EXTENDED + 1]);
        assert!(matches!(encode(&msg), Err(CoapError::OptionTooLarge(_))));
    }

    #[test]
    fn extended_deltas_and_lengths() {
        let mut msg = CoapMessage::request(Code::PUT, "/5/0/0");
        msg.add_option(option::SIZE1, encode_uint(399_554));
        msg.add_option(2000, vec![7; 300]);
        msg.payload = vec![1, 2, 3];
        let bytes = encode(&msg).unwrap();
        assert_eq!(decode(&bytes).unwrap(), msg);
    }

    #[test]
    fn options_come_back_sorted() {
        let mut msg = CoapMessage::new(MessageType::Con, Code::GET);
        msg.options = vec![
            CoapOption { number: 15, value: b"b".to_vec() },
            CoapOption { number: 11, value: b"a".to_vec() },
            CoapOption { number: 11, value: b"c".to_vec() },
        ];
        let back = decode(&encode(&msg).unwrap()).unwrap();
        let numbers: Vec<u16> = back.options.iter().map(|o| o.number).collect();
        assert_eq!(numbers, vec![11, 11, 15]);
        assert_eq!(back.uri_path(), "/a/c");
    }

    #[test]
    fn uint_options() {
        assert_eq!(encode_uint(0), Vec::<u8>::new());
        assert_eq!(encode_uint(0x0102), vec![1, 2]);
        assert_eq!(decode_uint(&[1, 2]), 0x0102);
        assert_eq!(decode_uint(&[]), 0);
    }

    #[test]
    fn path_and_query_helpers() {
        let mut msg = CoapMessage::request(Code::POST, "/rd");
        msg.add_uri_query("ep", "thingy91");
        msg.add_uri_query("lt", "86400");
        assert_eq!(msg.uri_path(), "/rd");
        assert_eq!(
            msg.uri_queries(),
            vec![("ep".into(), "thingy91".into()), ("lt".into(), "86400".into())]
        );
        msg.set_location_path("/rd/1");
        assert_eq!(msg.location_path(), "/rd/1");
    }

    pub(crate) fn arb_message() -> impl Strategy<Value = CoapMessage> {
        (
            0u8..4,
            0u8..8,
            0u8..32,
            any::<u16>(),
            proptest::collection::vec(any::<u8>(), 0..=8),
            proptest::collection::vec(
                (1u16..3000, proptest::collection::vec(any::<u8>(), 0..300)),
                0..6,
            ),
            proptest::collection::vec(any::<u8>(), 0..512),
        )
            .prop_map(|(t, class, detail, mid, token, opts, payload)| {
                let mut msg = CoapMessage::new(MessageType::from_bits(t), Code::new(class, detail));
                msg.message_id = mid;
                msg.token = token;
                for (n, v) in opts {
                    msg.add_option(n, v);
                }
                msg.payload = payload;
                msg
            })
    }

    proptest! {
        #[test]
        fn round_trip(msg in arb_message()) {
            let bytes = encode(&msg).unwrap();
            prop_assert_eq!(decode(&bytes).unwrap(), msg);
        }

        #[test]
        fn decode_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
            if let Ok(msg) = decode(&bytes) {
                // anything that decodes re-encodes to a decodable equal message
                let again = encode(&msg).unwrap();
                prop_assert_eq!(decode(&again).unwrap(), msg);
            }
        }
    }
}
