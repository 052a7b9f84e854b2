//! Block-wise transfer. Block1 carries request payloads (firmware push),
//! Block2 carries response payloads (firmware pull).

use std::net::SocketAddr;

use super::endpoint::CoapEndpoint;
use super::message::{encode_uint, option, Code, CoapMessage};
use super::CoapError;

pub const DEFAULT_BLOCK_SIZE: usize = 512;
/// Upper bound for a reassembled body.
pub const MAX_BODY: usize = 16 * 1024 * 1024;
/// Exchanges tried per block before a transfer gives up.
pub const BLOCK_ATTEMPTS: u32 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockOpt {
    pub num: u32,
    pub more: bool,
    pub szx: u8,
}

impl BlockOpt {
    pub fn new(num: u32, more: bool, size: usize) -> Result<BlockOpt, CoapError> {
        Ok(BlockOpt {
            num,
            more,
            szx: szx_for(size)?,
        })
    }

    pub fn size(&self) -> usize {
        1 << (self.szx as usize + 4)
    }

    pub fn offset(&self) -> usize {
        self.num as usize * self.size()
    }

    pub fn to_value(&self) -> u32 {
        (self.num << 4) | ((self.more as u32) << 3) | (self.szx as u32 & 0x7)
    }

    pub fn from_value(v: u32) -> BlockOpt {
        BlockOpt {
            num: v >> 4,
            more: v & 0x8 != 0,
            szx: (v & 0x7).min(6) as u8,
        }
    }

    pub fn from_message(msg: &CoapMessage, number: u16) -> Option<BlockOpt> {
        msg.uint_option(number).map(BlockOpt::from_value)
    }

    pub fn write_to(&self, msg: &mut CoapMessage, number: u16) {
        msg.set_option(number, encode_uint(self.to_value()));
    }
}

/// Size exponent for a power-of-two block size in 16..=1024.
pub fn szx_for(size: usize) -> Result<u8, CoapError> {
    if !(16..=1024).contains(&size) || !size.is_power_of_two() {
        return Err(CoapError::InvalidBlockSize(size));
    }
    Ok((size.trailing_zeros() - 4) as u8)
}

/// Number of blocks needed for `len` bytes; an empty body still takes one.
pub fn block_count(len: usize, block_size: usize) -> usize {
    len.div_ceil(block_size).max(1)
}

#[derive(Clone, Debug)]
pub struct BlockTransfer {
    pub response: CoapMessage,
    pub blocks: u32,
    pub bytes: usize,
}

/// One block exchange. Once a transfer is under way a silent peer is tried
/// again, up to [`BLOCK_ATTEMPTS`] times; re-sending a block is harmless since
/// receivers accept a repeat of the block just stored.
async fn exchange_block(
    endpoint: &CoapEndpoint,
    peer: SocketAddr,
    req: CoapMessage,
    first: bool,
) -> Result<CoapMessage, CoapError> {
    let attempts = if first { 1 } else { BLOCK_ATTEMPTS };
    let mut attempt = 1;
    loop {
        match endpoint.exchange(peer, req.clone()).await {
            Err(CoapError::Unreachable) if attempt < attempts => attempt += 1,
            res => return res,
        }
    }
}

/// Send `payload` as a Block1 sequence built from `template` (method, path,
/// content format). Each block is acknowledged before the next is sent; a
/// block that stays unacknowledged aborts the transfer.
pub async fn block1_upload(
    endpoint: &CoapEndpoint,
    peer: SocketAddr,
    template: &CoapMessage,
    payload: &[u8],
    block_size: usize,
) -> Result<BlockTransfer, CoapError> {
    szx_for(block_size)?;
    let total = block_count(payload.len(), block_size);
    let mut bytes = 0usize;
    for num in 0..total {
        let start = num * block_size;
        let end = (start + block_size).min(payload.len());
        let more = num + 1 < total;
        let mut req = template.clone();
        req.token.clear();
        req.payload = payload[start..end].to_vec();
        BlockOpt::new(num as u32, more, block_size)?.write_to(&mut req, option::BLOCK1);
        if num == 0 {
            req.set_uint_option(option::SIZE1, payload.len() as u32);
        }
        let resp = exchange_block(endpoint, peer, req, num == 0).await?;
        if !resp.code.is_success() {
            return Err(CoapError::Response(resp.code));
        }
        bytes += end - start;
        if !more {
            return Ok(BlockTransfer {
                response: resp,
                blocks: total as u32,
                bytes,
            });
        }
    }
    unreachable!("loop returns on the final block")
}

/// Fetch a resource with Block2, starting at block 0 with `block_size`.
/// Follows the server's block size if it picks a smaller one.
pub async fn block2_download(
    endpoint: &CoapEndpoint,
    peer: SocketAddr,
    template: &CoapMessage,
    block_size: usize,
) -> Result<(Vec<u8>, u32), CoapError> {
    let mut body = Vec::new();
    let mut next = BlockOpt::new(0, false, block_size)?;
    let mut blocks = 0u32;
    loop {
        let mut req = template.clone();
        req.token.clear();
        next.write_to(&mut req, option::BLOCK2);
        let resp = exchange_block(endpoint, peer, req, blocks == 0).await?;
        if !resp.code.is_success() {
            return Err(CoapError::Response(resp.code));
        }
        blocks += 1;
        let Some(got) = BlockOpt::from_message(&resp, option::BLOCK2) else {
            // server ignored Block2 and sent everything
            return Ok((resp.payload, blocks));
        };
        if got.offset() != body.len() {
            return Err(CoapError::BlockAborted(format!(
                "block {} at offset {} but have {} bytes",
                got.num,
                got.offset(),
                body.len()
            )));
        }
        body.extend_from_slice(&resp.payload);
        if body.len() > MAX_BODY {
            return Err(CoapError::BlockAborted("body too large".into()));
        }
        if !got.more {
            return Ok((body, blocks));
        }
        let size = got.size();
        next = BlockOpt {
            num: (body.len() / size) as u32,
            more: false,
            szx: got.szx,
        };
    }
}

/// Build a Block2 response for `payload` given the requested block (or the
/// first block of `default_size` when the request had no Block2 option).
pub fn block2_response(
    request: &CoapMessage,
    payload: &[u8],
    default_size: usize,
) -> Result<CoapMessage, CoapError> {
    let want = match BlockOpt::from_message(request, option::BLOCK2) {
        Some(b) => b,
        None => BlockOpt::new(0, false, default_size)?,
    };
    let size = want.size();
    let start = want.offset();
    if start > payload.len() || (start == payload.len() && start != 0) {
        return Ok(CoapMessage::response_to(request, Code::BAD_OPTION));
    }
    let end = (start + size).min(payload.len());
    let mut resp = CoapMessage::response_to(request, Code::CONTENT);
    BlockOpt {
        num: want.num,
        more: end < payload.len(),
        szx: want.szx,
    }
    .write_to(&mut resp, option::BLOCK2);
    if want.num == 0 {
        resp.set_uint_option(option::SIZE2, payload.len() as u32);
    }
    resp.payload = payload[start..end].to_vec();
    Ok(resp)
}

#[derive(Debug, PartialEq, Eq)]
pub enum Block1Outcome {
    /// Block stored; answer 2.31 echoing this option.
    Continue(BlockOpt),
    /// Final block stored; the whole body.
    Complete(Vec<u8>),
    /// Out-of-order block; answer 4.08.
    Incomplete,
    /// Body would exceed the limit; answer 4.13.
    TooLarge,
}

/// Receiver-side reassembly of one Block1 transfer.
#[derive(Debug)]
pub struct Block1Assembler {
    buf: Vec<u8>,
    next_num: u32,
    block_size: usize,
    active: bool,
    limit: usize,
}

impl Block1Assembler {
    pub fn new(limit: usize) -> Block1Assembler {
        Block1Assembler {
            buf: Vec::new(),
            next_num: 0,
            block_size: 0,
            active: false,
            limit,
        }
    }

    pub fn is_active(&self) -> bool {
        self.active
    }

    pub fn received(&self) -> usize {
        self.buf.len()
    }

    /// Discard any partial body.
    pub fn reset(&mut self) {
        self.buf = Vec::new();
        self.next_num = 0;
        self.active = false;
    }

    pub fn accept(&mut self, opt: BlockOpt, payload: &[u8]) -> Block1Outcome {
        if opt.num == 0 {
            self.reset();
            self.active = true;
            self.block_size = opt.size();
        } else if !self.active || opt.size() != self.block_size {
            return Block1Outcome::Incomplete;
        } else if opt.num + 1 == self.next_num {
            // repeat of the block just stored
            let start = opt.num as usize * self.block_size;
            if self.buf.get(start..) == Some(payload) {
                return Block1Outcome::Continue(opt);
            }
            return Block1Outcome::Incomplete;
        } else if opt.num != self.next_num {
            return Block1Outcome::Incomplete;
        }
        if opt.more && payload.len() != self.block_size {
            self.reset();
            return Block1Outcome::Incomplete;
        }
        if self.buf.len() + payload.len() > self.limit {
            self.reset();
            return Block1Outcome::TooLarge;
        }
        self.buf.extend_from_slice(payload);
        self.next_num = opt.num + 1;
        if opt.more {
            Block1Outcome::Continue(opt)
        } else {
            self.active = false;
            self.next_num = 0;
            Block1Outcome::Complete(std::mem::take(&mut self.buf))
        }
    }
}
