//! IV-synchronized authenticated channel between the CPU and GPU endpoints.
//!
//! Each direction has its own 64-bit counter. Both ends start from a shared
//! value and advance by one per message, so the IV never travels with the
//! ciphertext: a message decrypted under the wrong counter fails its tag
//! check. That is how replayed, duplicated, or reordered messages are caught.
//!
//! The cipher is AES-256-GCM. The 96-bit nonce is a 32-bit direction tag
//! followed by the big-endian counter, so the two directions never collide
//! under the one session key. Message kind and destination address are bound
//! as associated data.

use std::collections::VecDeque;
use std::fmt;
use std::sync::{Arc, Mutex};

use aes_gcm::aead::{AeadInPlace, KeyInit};
use aes_gcm::{Aes256Gcm, Nonce, Tag};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest plaintext carried by one channel message.
pub const MAX_MESSAGE_BYTES: u64 = 32 << 20;
pub const TAG_BYTES: usize = 16;
pub const NOP_PAYLOAD: [u8; 1] = [0x00];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ChannelError {
    /// Tag verification failed: tampering or IV desynchronization.
    #[error("authentication failed at iv {iv} ({direction})")]
    Auth { direction: Direction, iv: u64 },
    #[error("no message in flight")]
    Empty,
    #[error("plaintext must not be empty")]
    EmptyPlaintext,
    #[error("plaintext of {0} bytes exceeds the {MAX_MESSAGE_BYTES}-byte message limit")]
    TooLarge(u64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    HostToDevice,
    DeviceToHost,
}

impl Direction {
    fn nonce_tag(self) -> u32 {
        match self {
            Direction::HostToDevice => 0x4832_4400,
            Direction::DeviceToHost => 0x4432_4800,
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::HostToDevice => "h2d",
            Direction::DeviceToHost => "d2h",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Cpu,
    Gpu,
}

impl Side {
    pub fn send_direction(self) -> Direction {
        match self {
            Side::Cpu => Direction::HostToDevice,
            Side::Gpu => Direction::DeviceToHost,
        }
    }
}

/// 256-bit session key with its expanded cipher state.
#[derive(Clone)]
pub struct ChannelKey {
    bytes: [u8; 32],
    cipher: Aes256Gcm,
}

impl fmt::Debug for ChannelKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("ChannelKey(..)")
    }
}

impl ChannelKey {
    pub fn generate<R: RngCore + ?Sized>(rng: &mut R) -> Self {
        let mut bytes = [0u8; 32];
        rng.fill_bytes(&mut bytes);
        Self::from_bytes(bytes)
    }

    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        let cipher = Aes256Gcm::new(&bytes.into());
        ChannelKey { bytes, cipher }
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.bytes
    }
}

#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct IvCounter(u64);

impl IvCounter {
    pub fn new(value: u64) -> Self {
        IvCounter(value)
    }

    pub fn value(self) -> u64 {
        self.0
    }

    fn advance(&mut self) -> u64 {
        let v = self.0;
        self.0 = v.checked_add(1).expect("IV space exhausted");
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MsgKind {
    Data,
    Nop,
}

/// One sealed message. The IV it was sealed under is deliberately absent.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CiphertextMsg {
    pub payload: Vec<u8>,
    pub auth_tag: [u8; TAG_BYTES],
    pub declared_len: u64,
    pub kind: MsgKind,
    /// Destination address on the receiving side (authenticated).
    pub dest: u64,
}

fn nonce_for(direction: Direction, iv: u64) -> [u8; 12] {
    let mut n = [0u8; 12];
    n[..4].copy_from_slice(&direction.nonce_tag().to_be_bytes());
    n[4..].copy_from_slice(&iv.to_be_bytes());
    n
}

fn aad_for(kind: MsgKind, dest: u64, len: u64) -> [u8; 17] {
    let mut aad = [0u8; 17];
    aad[0] = match kind {
        MsgKind::Data => 1,
        MsgKind::Nop => 2,
    };
    aad[1..9].copy_from_slice(&dest.to_be_bytes());
    aad[9..].copy_from_slice(&len.to_be_bytes());
    aad
}

/// Seal `plaintext` under `(key, direction, iv)`. Deterministic.
pub fn encrypt_at(
    key: &ChannelKey,
    direction: Direction,
    iv: u64,
    kind: MsgKind,
    dest: u64,
    plaintext: &[u8],
) -> Result<CiphertextMsg, ChannelError> {
    let len = plaintext.len() as u64;
    if len == 0 {
        return Err(ChannelError::EmptyPlaintext);
    }
    if len > MAX_MESSAGE_BYTES {
        return Err(ChannelError::TooLarge(len));
    }
    let nonce = nonce_for(direction, iv);
    let mut payload = plaintext.to_vec();
    let tag = key
        .cipher
        .encrypt_in_place_detached(
            Nonce::from_slice(&nonce),
            &aad_for(kind, dest, len),
            &mut payload,
        )
        .expect("message length within AES-GCM limits");
    Ok(CiphertextMsg {
        payload,
        auth_tag: tag.into(),
        declared_len: len,
        kind,
        dest,
    })
}

/// Open a message sealed at `iv`.
pub fn decrypt_at(
    key: &ChannelKey,
    direction: Direction,
    iv: u64,
    msg: &CiphertextMsg,
) -> Result<Vec<u8>, ChannelError> {
    let auth = ChannelError::Auth { direction, iv };
    if msg.payload.len() as u64 != msg.declared_len {
        return Err(auth);
    }
    let nonce = nonce_for(direction, iv);
    let mut buf = msg.payload.clone();
    key.cipher
        .decrypt_in_place_detached(
            Nonce::from_slice(&nonce),
            &aad_for(msg.kind, msg.dest, msg.declared_len),
            &mut buf,
            Tag::from_slice(&msg.auth_tag),
        )
        .map_err(|_| auth)?;
    Ok(buf)
}

/// FIFO of in-flight messages for one direction.
#[derive(Debug, Default)]
pub struct Link {
    queue: Mutex<VecDeque<CiphertextMsg>>,
}

impl Link {
    fn push(&self, msg: CiphertextMsg) {
        self.queue.lock().expect("link poisoned").push_back(msg);
    }

    fn pop(&self) -> Option<CiphertextMsg> {
        self.queue.lock().expect("link poisoned").pop_front()
    }

    pub fn len(&self) -> usize {
        self.queue.lock().expect("link poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(feature = "fault-injection")]
impl Link {
    /// Swap two in-flight messages.
    pub fn inject_swap(&self, i: usize, j: usize) {
        self.queue.lock().expect("link poisoned").swap(i, j);
    }

    /// Queue a second copy of message `i` right after it.
    pub fn inject_duplicate(&self, i: usize) {
        let mut q = self.queue.lock().expect("link poisoned");
        let copy = q[i].clone();
        q.insert(i + 1, copy);
    }

    /// Flip one bit of message `i`. Bits past the payload land in the tag.
    pub fn inject_bit_flip(&self, i: usize, bit: usize) {
        let mut q = self.queue.lock().expect("link poisoned");
        let msg = &mut q[i];
        let payload_bits = msg.payload.len() * 8;
        let bit = bit % (payload_bits + TAG_BYTES * 8);
        if bit < payload_bits {
            msg.payload[bit / 8] ^= 1 << (bit % 8);
        } else {
            let b = bit - payload_bits;
            msg.auth_tag[b / 8] ^= 1 << (b % 8);
        }
    }

    pub fn inject_drop(&self, i: usize) -> Option<CiphertextMsg> {
        self.queue.lock().expect("link poisoned").remove(i)
    }
}

/// What the receiver gets out of one message.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Delivery {
    Data { dest: u64, bytes: Vec<u8> },
    Nop,
}

/// A ciphertext taken off the link whose decryption has been postponed. The
/// receive counter already moved past it.
#[derive(Clone, Debug)]
pub struct DeferredMsg {
    pub iv: u64,
    pub msg: CiphertextMsg,
}

#[derive(Debug)]
pub struct ChannelEndpoint {
    side: Side,
    key: ChannelKey,
    send_iv: IvCounter,
    recv_iv: IvCounter,
    outbound: Arc<Link>,
    inbound: Arc<Link>,
}

/// Build both endpoints of a fresh session.
pub fn new_channel<R: RngCore + ?Sized>(
    rng: &mut R,
    initial_iv_h2d: u64,
    initial_iv_d2h: u64,
) -> (ChannelEndpoint, ChannelEndpoint) {
    let key = ChannelKey::generate(rng);
    let h2d = Arc::new(Link::default());
    let d2h = Arc::new(Link::default());
    let cpu = ChannelEndpoint {
        side: Side::Cpu,
        key: key.clone(),
        send_iv: IvCounter(initial_iv_h2d),
        recv_iv: IvCounter(initial_iv_d2h),
        outbound: h2d.clone(),
        inbound: d2h.clone(),
    };
    let gpu = ChannelEndpoint {
        side: Side::Gpu,
        key,
        send_iv: IvCounter(initial_iv_d2h),
        recv_iv: IvCounter(initial_iv_h2d),
        outbound: d2h,
        inbound: h2d,
    };
    (cpu, gpu)
}

impl ChannelEndpoint {
    pub fn side(&self) -> Side {
        self.side
    }

    pub fn key(&self) -> &ChannelKey {
        &self.key
    }

    pub fn send_iv(&self) -> u64 {
        self.send_iv.value()
    }

    pub fn recv_iv(&self) -> u64 {
        self.recv_iv.value()
    }

    pub fn send_direction(&self) -> Direction {
        self.side.send_direction()
    }

    pub fn outbound(&self) -> &Arc<Link> {
        &self.outbound
    }

    pub fn inbound(&self) -> &Arc<Link> {
        &self.inbound
    }

    /// Seal a data message at an arbitrary IV in this endpoint's send
    /// direction. Used for speculative pre-encryption.
    pub fn encrypt_at(
        &self,
        iv: u64,
        dest: u64,
        plaintext: &[u8],
    ) -> Result<CiphertextMsg, ChannelError> {
        encrypt_at(
            &self.key,
            self.send_direction(),
            iv,
            MsgKind::Data,
            dest,
            plaintext,
        )
    }

    /// Queue `ct` for the peer. The caller guarantees `ct` was sealed at the
    /// current send IV; a mismatch surfaces as an auth failure at the peer.
    pub fn send(&mut self, ct: CiphertextMsg) {
        self.send_iv.advance();
        self.outbound.push(ct);
    }

    /// Seal at the current send IV and send.
    pub fn send_data(&mut self, dest: u64, plaintext: &[u8]) -> Result<(), ChannelError> {
        let ct = self.encrypt_at(self.send_iv(), dest, plaintext)?;
        self.send(ct);
        Ok(())
    }

    /// Send a one-byte dummy message whose only effect is advancing the IV.
    pub fn nop(&mut self) {
        let ct = encrypt_at(
            &self.key,
            self.send_direction(),
            self.send_iv(),
            MsgKind::Nop,
            0,
            &NOP_PAYLOAD,
        )
        .expect("NOP payload is one byte");
        self.send(ct);
    }

    /// Receive and authenticate the next message.
    pub fn recv(&mut self) -> Result<Delivery, ChannelError> {
        let msg = self.inbound.pop().ok_or(ChannelError::Empty)?;
        let direction = self.side_recv_direction();
        let iv = self.recv_iv.value();
        let bytes = decrypt_at(&self.key, direction, iv, &msg)?;
        self.recv_iv.advance();
        Ok(match msg.kind {
            MsgKind::Data => Delivery::Data {
                dest: msg.dest,
                bytes,
            },
            MsgKind::Nop => Delivery::Nop,
        })
    }

    /// Take the next message without decrypting it; the receive counter
    /// advances and the IV travels with the returned handle.
    pub fn recv_deferred(&mut self) -> Result<DeferredMsg, ChannelError> {
        let msg = self.inbound.pop().ok_or(ChannelError::Empty)?;
        let iv = self.recv_iv.advance();
        Ok(DeferredMsg { iv, msg })
    }

    /// Complete a deferred receive.
    pub fn open_deferred(&self, deferred: &DeferredMsg) -> Result<Vec<u8>, ChannelError> {
        decrypt_at(
            &self.key,
            self.side_recv_direction(),
            deferred.iv,
            &deferred.msg,
        )
    }

    fn side_recv_direction(&self) -> Direction {
        match self.side {
            Side::Cpu => Direction::DeviceToHost,
            Side::Gpu => Direction::HostToDevice,
        }
    }

    pub fn in_flight_inbound(&self) -> usize {
        self.inbound.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn channel(h2d: u64, d2h: u64) -> (ChannelEndpoint, ChannelEndpoint) {
        let mut rng = ChaCha20Rng::seed_from_u64(42);
        new_channel(&mut rng, h2d, d2h)
    }

    #[test]
    fn counters_start_where_configured() {
        let (cpu, gpu) = channel(1, 5);
        assert_eq!((cpu.send_iv(), gpu.recv_iv()), (1, 1));
        assert_eq!((gpu.send_iv(), cpu.recv_iv()), (5, 5));
        let (cpu, gpu) = channel(0, 0);
        assert_eq!(
            [cpu.send_iv(), cpu.recv_iv(), gpu.send_iv(), gpu.recv_iv()],
            [0; 4]
        );
    }

    #[test]
    fn independent_seeds_give_distinct_keys() {
        let mut keys = std::collections::HashSet::new();
        for seed in 0..100u64 {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let (cpu, _) = new_channel(&mut rng, 0, 0);
            keys.insert(*cpu.key().as_bytes());
        }
        assert_eq!(keys.len(), 100);
    }

    #[test]
    fn encryption_is_deterministic_and_iv_sensitive() {
        let (cpu, _) = channel(0, 0);
        let p = b"layer three weights";
        let a = cpu.encrypt_at(3, 0, p).unwrap();
        let b = cpu.encrypt_at(3, 0, p).unwrap();
        let c = cpu.encrypt_at(4, 0, p).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.payload, c.payload);
        assert_eq!(
            cpu.encrypt_at(3, 0, &[]).unwrap_err(),
            ChannelError::EmptyPlaintext
        );
    }

    #[test]
    fn directions_use_distinct_nonces() {
        let (cpu, gpu) = channel(7, 7);
        let a = cpu.encrypt_at(7, 0, b"same").unwrap();
        let b = gpu.encrypt_at(7, 0, b"same").unwrap();
        assert_ne!(a.payload, b.payload);
    }

    #[test]
    fn send_recv_roundtrip() {
        let (mut cpu, mut gpu) = channel(1, 5);
        let ct = cpu.encrypt_at(1, 0x40, b"hello").unwrap();
        cpu.send(ct);
        assert_eq!(cpu.send_iv(), 2);
        assert_eq!(
            gpu.recv().unwrap(),
            Delivery::Data {
                dest: 0x40,
                bytes: b"hello".to_vec()
            }
        );
        assert_eq!(gpu.recv_iv(), 2);
        assert_eq!(gpu.recv().unwrap_err(), ChannelError::Empty);
    }

    #[test]
    fn replay_without_counter_advance_is_rejected() {
        let (mut cpu, mut gpu) = channel(1, 1);
        let ct = cpu.encrypt_at(1, 0, b"weights").unwrap();
        cpu.send(ct.clone());
        cpu.send(ct);
        assert!(gpu.recv().is_ok());
        assert_eq!(
            gpu.recv().unwrap_err(),
            ChannelError::Auth {
                direction: Direction::HostToDevice,
                iv: 2
            }
        );
    }

    #[cfg(feature = "fault-injection")]
    #[test]
    fn reordered_messages_are_rejected() {
        let (mut cpu, mut gpu) = channel(0, 0);
        cpu.send_data(0, b"first").unwrap();
        cpu.send_data(0, b"second").unwrap();
        cpu.outbound().inject_swap(0, 1);
        assert!(matches!(gpu.recv(), Err(ChannelError::Auth { iv: 0, .. })));
    }

    #[test]
    fn nops_advance_counters_only() {
        let (mut cpu, mut gpu) = channel(2, 0);
        cpu.nop();
        assert_eq!(cpu.send_iv(), 3);
        assert_eq!(gpu.recv().unwrap(), Delivery::Nop);
        assert_eq!(gpu.recv_iv(), 3);
        for _ in 0..5 {
            cpu.nop();
        }
        cpu.send_data(9, b"x").unwrap();
        for _ in 0..5 {
            assert_eq!(gpu.recv().unwrap(), Delivery::Nop);
        }
        assert_eq!(
            gpu.recv().unwrap(),
            Delivery::Data {
                dest: 9,
                bytes: b"x".to_vec()
            }
        );
        assert_eq!(cpu.send_iv(), gpu.recv_iv());
    }

    #[test]
    fn deferred_receive_advances_counter_first() {
        let (mut cpu, mut gpu) = channel(0, 10);
        gpu.send_data(0x99, b"kv block").unwrap();
        gpu.send_data(0x99, b"token").unwrap();
        let deferred = cpu.recv_deferred().unwrap();
        assert_eq!(deferred.iv, 10);
        assert_eq!(cpu.recv_iv(), 11);
        assert_eq!(
            cpu.recv().unwrap(),
            Delivery::Data {
                dest: 0x99,
                bytes: b"token".to_vec()
            }
        );
        assert_eq!(cpu.open_deferred(&deferred).unwrap(), b"kv block");
    }

    #[test]
    fn oversized_plaintext_rejected() {
        let (cpu, _) = channel(0, 0);
        let big = vec![0u8; MAX_MESSAGE_BYTES as usize + 1];
        assert_eq!(
            cpu.encrypt_at(0, 0, &big).unwrap_err(),
            ChannelError::TooLarge(MAX_MESSAGE_BYTES + 1)
        );
    }
}
