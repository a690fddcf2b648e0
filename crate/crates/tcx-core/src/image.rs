//! Sealed container images: layered plaintext goes in, a block-encrypted,
//! per-block-authenticated file comes out. Each 4096-byte block is
//! encrypted with AES-256 in XTS mode using the block index as tweak, then
//! tagged with HMAC-SHA256 over (image id ∥ block index ∥ ciphertext) —
//! encrypt-then-MAC, so nothing is decrypted before its tag verifies. The
//! index and image id in the MAC input pin every block to its position in
//! this image: blocks cannot be swapped, and an overlay cannot be replayed
//! against a different base image.
//!
//! Writes never touch the base image; they land in an overlay file keyed
//! by block index, encrypted and tagged under the same image key. The
//! header (magic, geometry, layer table, true byte lengths) carries its
//! own tag, so truncation and geometry tampering are caught before any
//! block is read. A failed header tag is reported as `WrongKey`: a wrong
//! key and a forged header are indistinguishable by construction.

use std::collections::BTreeMap;

use aes::cipher::generic_array::GenericArray;
use aes::cipher::KeyInit;
use aes::Aes256;
use thiserror::Error;
use xts_mode::{get_tweak_default, Xts128};

use crate::crypto::{hkdf_derive, hmac_sha256, Entropy, LABEL_IMAGE_ENC, LABEL_IMAGE_MAC};
use crate::wire::{Reader, Wire, WireError, Writer};

pub const BLOCK_SIZE: usize = 4096;
pub const MAGIC: &[u8; 7] = b"TCXIMG1";
const TAG_LEN: usize = 32;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ImageError {
    #[error("an image needs at least one layer")]
    NoLayers,
    #[error("duplicate layer id {0:?}")]
    DuplicateLayer(String),
    #[error("no layer named {0:?}")]
    NoSuchLayer(String),
    #[error("key does not authenticate this image")]
    WrongKey,
    #[error("integrity check failed for block {block}")]
    IntegrityFailure { block: u64 },
    #[error("block index {index} out of range ({blocks} blocks)")]
    IndexOutOfRange { index: u64, blocks: u64 },
    #[error("overlay was created for a different base image")]
    OverlayMismatch,
    #[error("block larger than {BLOCK_SIZE} bytes")]
    OversizedBlock,
    #[error("malformed image bytes: {0}")]
    Wire(#[from] WireError),
}

/// The container image key. Generated by the image's owner; travels only
/// inside the sealed secret bundle.
#[derive(Clone, PartialEq, Eq)]
pub struct ImageKey {
    pub image_id: [u8; 32],
    key: [u8; 32],
}

impl ImageKey {
    pub fn new(image_id: [u8; 32], key: [u8; 32]) -> Self {
        ImageKey { image_id, key }
    }

    pub fn generate(entropy: &mut Entropy, image_id: [u8; 32]) -> Self {
        ImageKey {
            image_id,
            key: entropy.bytes(),
        }
    }

    pub fn key_bytes(&self) -> [u8; 32] {
        self.key
    }
}

impl std::fmt::Debug for ImageKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ImageKey")
            .field("image_id", &hex::encode(self.image_id))
            .field("key", &"<redacted>")
            .finish()
    }
}

impl Wire for ImageKey {
    fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.field(&self.image_id).field(&self.key);
        w.finish()
    }

    fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(bytes);
        let image_id = r.fixed()?;
        let key = r.fixed()?;
        r.done()?;
        Ok(ImageKey { image_id, key })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerEntry {
    pub layer_id: String,
    pub first_block: u64,
    pub block_count: u64,
    /// True byte length before zero-padding to the block boundary.
    pub byte_len: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageHeader {
    pub block_size: u32,
    pub block_count: u64,
    pub image_id: [u8; 32],
    pub layer_table: Vec<LayerEntry>,
}

impl ImageHeader {
    /// Header bytes covered by the header tag (magic included).
    fn tbs_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.field(MAGIC)
            .u32_field(self.block_size)
            .u64_field(self.block_count)
            .field(&self.image_id);
        let entries: Vec<Vec<u8>> = self
            .layer_table
            .iter()
            .map(|e| {
                let mut ew = Writer::new();
                ew.str_field(&e.layer_id)
                    .u64_field(e.first_block)
                    .u64_field(e.block_count)
                    .u64_field(e.byte_len);
                ew.finish()
            })
            .collect();
        w.list_field(&entries);
        w.finish()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SealedImage {
    pub header: ImageHeader,
    pub header_tag: [u8; 32],
    pub blocks: Vec<[u8; BLOCK_SIZE]>,
    pub tags: Vec<[u8; 32]>,
}

impl SealedImage {
    pub fn block_count(&self) -> u64 {
        self.header.block_count
    }

    /// On-disk form: magic, tagged header, then the raw block and tag
    /// arrays back to back (their lengths are fixed by the header).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.header.tbs_bytes();
        let mut w = Writer::new();
        w.field(&self.header_tag);
        out.extend_from_slice(&w.finish());
        for b in &self.blocks {
            out.extend_from_slice(b);
        }
        for t in &self.tags {
            out.extend_from_slice(t);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ImageError> {
        // The header region is wire-framed; blocks and tags follow raw.
        let mut r = Reader::new(bytes);
        let magic = r.field()?;
        if magic != MAGIC {
            return Err(WireError::Invalid {
                what: "image magic",
                detail: "not a sealed image".into(),
            }
            .into());
        }
        let block_size = r.u32_field()?;
        if block_size as usize != BLOCK_SIZE {
            return Err(WireError::Invalid {
                what: "block size",
                detail: format!("expected {BLOCK_SIZE}, got {block_size}"),
            }
            .into());
        }
        let block_count = r.u64_field()?;
        let image_id = r.fixed()?;
        let entries = r.list_field()?;
        let mut layer_table = Vec::with_capacity(entries.len());
        for e in &entries {
            let mut er = Reader::new(e);
            layer_table.push(LayerEntry {
                layer_id: er.str_field()?,
                first_block: er.u64_field()?,
                block_count: er.u64_field()?,
                byte_len: er.u64_field()?,
            });
            er.done()?;
        }
        let header_tag: [u8; 32] = r.fixed()?;
        let rest = r.remainder();

        let n = block_count as usize;
        let want = n
            .checked_mul(BLOCK_SIZE)
            .and_then(|b| b.checked_add(n * TAG_LEN))
            .ok_or(WireError::Invalid {
                what: "block count",
                detail: "overflows".into(),
            })?;
        if rest.len() != want {
            return Err(WireError::Invalid {
                what: "image body",
                detail: format!("expected {want} bytes of blocks+tags, got {}", rest.len()),
            }
            .into());
        }
        let mut blocks = Vec::with_capacity(n);
        for i in 0..n {
            let mut b = [0u8; BLOCK_SIZE];
            b.copy_from_slice(&rest[i * BLOCK_SIZE..(i + 1) * BLOCK_SIZE]);
            blocks.push(b);
        }
        let tag_base = n * BLOCK_SIZE;
        let mut tags = Vec::with_capacity(n);
        for i in 0..n {
            let mut t = [0u8; 32];
            t.copy_from_slice(&rest[tag_base + i * TAG_LEN..tag_base + (i + 1) * TAG_LEN]);
            tags.push(t);
        }
        Ok(SealedImage {
            header: ImageHeader {
                block_size,
                block_count,
                image_id,
                layer_table,
            },
            header_tag,
            blocks,
            tags,
        })
    }
}

/// Per-image cipher state: XTS for confidentiality, HMAC for integrity,
/// both derived from the image key and bound to the image id.
struct BlockCipher {
    xts: Xts128<Aes256>,
    mac_key: [u8; 32],
    image_id: [u8; 32],
}

impl BlockCipher {
    fn new(key: &ImageKey) -> Self {
        let xts_key: [u8; 64] = hkdf_derive(&key.key, LABEL_IMAGE_ENC, &key.image_id);
        let mac_key: [u8; 32] = hkdf_derive(&key.key, LABEL_IMAGE_MAC, &key.image_id);
        let c1 = Aes256::new(GenericArray::from_slice(&xts_key[..32]));
        let c2 = Aes256::new(GenericArray::from_slice(&xts_key[32..]));
        BlockCipher {
            xts: Xts128::new(c1, c2),
            mac_key,
            image_id: key.image_id,
        }
    }

    fn tag(&self, index: u64, ciphertext: &[u8; BLOCK_SIZE]) -> [u8; 32] {
        let mut input = Vec::with_capacity(32 + 8 + BLOCK_SIZE);
        input.extend_from_slice(&self.image_id);
        input.extend_from_slice(&index.to_be_bytes());
        input.extend_from_slice(ciphertext);
        hmac_sha256(&self.mac_key, &input)
    }

    fn header_tag(&self, header: &ImageHeader) -> [u8; 32] {
        let mut input = Vec::new();
        input.extend_from_slice(b"hdr");
        input.extend_from_slice(&header.tbs_bytes());
        hmac_sha256(&self.mac_key, &input)
    }

    fn seal_block(&self, index: u64, plaintext: &[u8; BLOCK_SIZE]) -> ([u8; BLOCK_SIZE], [u8; 32]) {
        let mut ct = *plaintext;
        self.xts
            .encrypt_sector(&mut ct, get_tweak_default(index as u128));
        let tag = self.tag(index, &ct);
        (ct, tag)
    }

    /// Authenticate, then decrypt. Never returns plaintext from a block
    /// whose tag failed.
    fn open_block(
        &self,
        index: u64,
        ciphertext: &[u8; BLOCK_SIZE],
        tag: &[u8; 32],
    ) -> Result<[u8; BLOCK_SIZE], ImageError> {
        if self.tag(index, ciphertext) != *tag {
            return Err(ImageError::IntegrityFailure { block: index });
        }
        let mut pt = *ciphertext;
        self.xts
            .decrypt_sector(&mut pt, get_tweak_default(index as u128));
        Ok(pt)
    }
}

/// Encrypts and tags the layers into a sealed image. Each layer is padded
/// to the block boundary independently; true lengths go in the header.
pub fn seal_image(layers: &[(String, Vec<u8>)], key: &ImageKey) -> Result<SealedImage, ImageError> {
    if layers.is_empty() {
        return Err(ImageError::NoLayers);
    }
    let mut seen = std::collections::HashSet::new();
    for (id, _) in layers {
        if !seen.insert(id.as_str()) {
            return Err(ImageError::DuplicateLayer(id.clone()));
        }
    }

    let cipher = BlockCipher::new(key);
    let mut layer_table = Vec::with_capacity(layers.len());
    let mut blocks = Vec::new();
    let mut tags = Vec::new();
    for (layer_id, bytes) in layers {
        let first_block = blocks.len() as u64;
        for chunk in bytes.chunks(BLOCK_SIZE) {
            let mut pt = [0u8; BLOCK_SIZE];
            pt[..chunk.len()].copy_from_slice(chunk);
            let (ct, tag) = cipher.seal_block(blocks.len() as u64, &pt);
            blocks.push(ct);
            tags.push(tag);
        }
        layer_table.push(LayerEntry {
            layer_id: layer_id.clone(),
            first_block,
            block_count: blocks.len() as u64 - first_block,
            byte_len: bytes.len() as u64,
        });
    }

    let header = ImageHeader {
        block_size: BLOCK_SIZE as u32,
        block_count: blocks.len() as u64,
        image_id: key.image_id,
        layer_table,
    };
    let header_tag = cipher.header_tag(&header);
    Ok(SealedImage {
        header,
        header_tag,
        blocks,
        tags,
    })
}

/// Writable overlay: dirty blocks shadow the base image, sealed under the
/// same image key. The base file is never modified.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OverlayFile {
    pub base_image_id: [u8; 32],
    pub dirty_blocks: BTreeMap<u64, ([u8; BLOCK_SIZE], [u8; 32])>,
}

impl OverlayFile {
    pub fn new(base: &SealedImage) -> Self {
        OverlayFile {
            base_image_id: base.header.image_id,
            dirty_blocks: BTreeMap::new(),
        }
    }
}

impl Wire for OverlayFile {
    fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.field(&self.base_image_id);
        let entries: Vec<Vec<u8>> = self
            .dirty_blocks
            .iter()
            .map(|(idx, (ct, tag))| {
                let mut ew = Writer::new();
                ew.u64_field(*idx).field(ct).field(tag);
                ew.finish()
            })
            .collect();
        w.list_field(&entries);
        w.finish()
    }

    fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(bytes);
        let base_image_id = r.fixed()?;
        let entries = r.list_field()?;
        let mut dirty_blocks = BTreeMap::new();
        for e in &entries {
            let mut er = Reader::new(e);
            let idx = er.u64_field()?;
            let ct: [u8; BLOCK_SIZE] = er.fixed()?;
            let tag: [u8; 32] = er.fixed()?;
            er.done()?;
            dirty_blocks.insert(idx, (ct, tag));
        }
        r.done()?;
        Ok(OverlayFile {
            base_image_id,
            dirty_blocks,
        })
    }
}

/// Seals `plaintext` (zero-padded to one block) into the overlay at
/// `block_index`. Rewriting an index replaces the dirty block.
pub fn snapshot_write(
    overlay: &mut OverlayFile,
    image: &SealedImage,
    block_index: u64,
    plaintext: &[u8],
    key: &ImageKey,
) -> Result<(), ImageError> {
    if overlay.base_image_id != image.header.image_id {
        return Err(ImageError::OverlayMismatch);
    }
    if key.image_id != image.header.image_id {
        return Err(ImageError::WrongKey);
    }
    if block_index >= image.header.block_count {
        return Err(ImageError::IndexOutOfRange {
            index: block_index,
            blocks: image.header.block_count,
        });
    }
    if plaintext.len() > BLOCK_SIZE {
        return Err(ImageError::OversizedBlock);
    }
    let mut pt = [0u8; BLOCK_SIZE];
    pt[..plaintext.len()].copy_from_slice(plaintext);
    let cipher = BlockCipher::new(key);
    let (ct, tag) = cipher.seal_block(block_index, &pt);
    overlay.dirty_blocks.insert(block_index, (ct, tag));
    Ok(())
}

/// Read view over a sealed image plus optional overlay. Every read
/// authenticates before decrypting; reads fail with the exact block index
/// that did not verify.
pub struct OpenImage<'a> {
    image: &'a SealedImage,
    overlay: Option<&'a OverlayFile>,
    cipher: BlockCipher,
}

impl std::fmt::Debug for OpenImage<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OpenImage")
            .field("image_id", &hex::encode(self.image.header.image_id))
            .field("blocks", &self.image.header.block_count)
            .field("overlay", &self.overlay.is_some())
            .finish()
    }
}

/// Authenticates the header under `key` and binds the overlay (if any) to
/// this image. Block tags are checked on each read.
pub fn open_image<'a>(
    image: &'a SealedImage,
    overlay: Option<&'a OverlayFile>,
    key: &ImageKey,
) -> Result<OpenImage<'a>, ImageError> {
    if key.image_id != image.header.image_id {
        return Err(ImageError::WrongKey);
    }
    let cipher = BlockCipher::new(key);
    if cipher.header_tag(&image.header) != image.header_tag {
        return Err(ImageError::WrongKey);
    }
    if let Some(o) = overlay {
        if o.base_image_id != image.header.image_id {
            return Err(ImageError::OverlayMismatch);
        }
    }
    Ok(OpenImage {
        image,
        overlay,
        cipher,
    })
}

impl OpenImage<'_> {
    pub fn block_count(&self) -> u64 {
        self.image.header.block_count
    }

    pub fn layers(&self) -> &[LayerEntry] {
        &self.image.header.layer_table
    }

    pub fn read_block(&self, index: u64) -> Result<[u8; BLOCK_SIZE], ImageError> {
        if index >= self.image.header.block_count {
            return Err(ImageError::IndexOutOfRange {
                index,
                blocks: self.image.header.block_count,
            });
        }
        if let Some((ct, tag)) = self.overlay.and_then(|o| o.dirty_blocks.get(&index)) {
            return self.cipher.open_block(index, ct, tag);
        }
        self.cipher
            .open_block(index, &self.image.blocks[index as usize], &self.image.tags[index as usize])
    }

    /// Reassembles one layer's plaintext, truncated to its true length.
    pub fn read_layer(&self, layer_id: &str) -> Result<Vec<u8>, ImageError> {
        let entry = self
            .image
            .header
            .layer_table
            .iter()
            .find(|e| e.layer_id == layer_id)
            .ok_or_else(|| ImageError::NoSuchLayer(layer_id.to_string()))?;
        let mut out = Vec::with_capacity(entry.byte_len as usize);
        for i in entry.first_block..entry.first_block + entry.block_count {
            out.extend_from_slice(&self.read_block(i)?);
        }
        out.truncate(entry.byte_len as usize);
        Ok(out)
    }

    pub fn read_all_layers(&self) -> Result<Vec<(String, Vec<u8>)>, ImageError> {
        self.image
            .header
            .layer_table
            .iter()
            .map(|e| Ok((e.layer_id.clone(), self.read_layer(&e.layer_id)?)))
            .collect()
    }
}

/// Full integrity sweep: header tag plus every block tag. Used by the
/// image-verify tooling; reads do the same checks lazily.
pub fn verify_image(image: &SealedImage, key: &ImageKey) -> Result<(), ImageError> {
    if key.image_id != image.header.image_id {
        return Err(ImageError::WrongKey);
    }
    let cipher = BlockCipher::new(key);
    if cipher.header_tag(&image.header) != image.header_tag {
        return Err(ImageError::WrongKey);
    }
    if image.blocks.len() as u64 != image.header.block_count
        || image.tags.len() as u64 != image.header.block_count
    {
        return Err(ImageError::WrongKey);
    }
    for (i, (ct, tag)) in image.blocks.iter().zip(&image.tags).enumerate() {
        if cipher.tag(i as u64, ct) != *tag {
            return Err(ImageError::IntegrityFailure { block: i as u64 });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn key(tag: u8) -> ImageKey {
        ImageKey::generate(&mut Entropy::from_seed([tag; 32]), [tag; 32])
    }

    fn layers(spec: &[(&str, usize, u8)]) -> Vec<(String, Vec<u8>)> {
        spec.iter()
            .map(|(id, len, fill)| (id.to_string(), vec![*fill; *len]))
            .collect()
    }

    #[test]
    fn one_zero_block_round_trips() {
        let k = key(1);
        let ls = layers(&[("base", 4096, 0)]);
        let img = seal_image(&ls, &k).unwrap();
        assert_eq!(img.block_count(), 1);
        let open = open_image(&img, None, &k).unwrap();
        assert_eq!(open.read_layer("base").unwrap(), vec![0u8; 4096]);
    }

    #[test]
    fn layer_padding_arithmetic() {
        // 5000 B -> 2 blocks, 3000 B -> 1 block; ranges do not overlap.
        let k = key(2);
        let ls = layers(&[("a", 5000, 0x11), ("b", 3000, 0x22)]);
        let img = seal_image(&ls, &k).unwrap();
        assert_eq!(img.block_count(), 3);
        let t = &img.header.layer_table;
        assert_eq!((t[0].first_block, t[0].block_count, t[0].byte_len), (0, 2, 5000));
        assert_eq!((t[1].first_block, t[1].block_count, t[1].byte_len), (2, 1, 3000));
        let open = open_image(&img, None, &k).unwrap();
        assert_eq!(open.read_layer("a").unwrap(), vec![0x11; 5000]);
        assert_eq!(open.read_layer("b").unwrap(), vec![0x22; 3000]);
    }

    #[test]
    fn ciphertext_hides_plaintext_and_blocks_differ() {
        // Two identical plaintext blocks: XTS tweak makes ciphertexts differ.
        let k = key(3);
        let img = seal_image(&layers(&[("a", 8192, 0x77)]), &k).unwrap();
        assert_ne!(img.blocks[0], img.blocks[1]);
        assert!(!img.blocks[0].iter().all(|&b| b == 0x77));
    }

    #[test]
    fn exhaustive_single_byte_tamper_on_two_block_image() {
        let k = key(4);
        let ls = layers(&[("a", 2 * BLOCK_SIZE, 0x5A)]);
        let img = seal_image(&ls, &k).unwrap();

        for block in 0..2usize {
            for byte in 0..BLOCK_SIZE {
                let mut bad = img.clone();
                bad.blocks[block][byte] ^= 0x01;
                let open = open_image(&bad, None, &k).unwrap();
                assert_eq!(
                    open.read_block(block as u64).unwrap_err(),
                    ImageError::IntegrityFailure { block: block as u64 },
                    "block {block} byte {byte}"
                );
                // The untouched block still reads.
                assert!(open.read_block(1 - block as u64).is_ok());
            }
            for byte in 0..TAG_LEN {
                let mut bad = img.clone();
                bad.tags[block][byte] ^= 0x01;
                let open = open_image(&bad, None, &k).unwrap();
                assert_eq!(
                    open.read_block(block as u64).unwrap_err(),
                    ImageError::IntegrityFailure { block: block as u64 }
                );
            }
        }
    }

    #[test]
    fn header_tamper_rejected_before_any_read() {
        let k = key(5);
        let mut img = seal_image(&layers(&[("a", 4096, 1)]), &k).unwrap();
        img.header.block_count = 2;
        assert_eq!(open_image(&img, None, &k).unwrap_err(), ImageError::WrongKey);
    }

    #[test]
    fn second_key_rejected_at_header() {
        let k1 = key(6);
        let img = seal_image(&layers(&[("a", 4096, 1)]), &k1).unwrap();
        // Same image id, different key bytes.
        let k2 = ImageKey::new(k1.image_id, [0xEE; 32]);
        assert_eq!(open_image(&img, None, &k2).unwrap_err(), ImageError::WrongKey);
        // Different image id entirely.
        assert_eq!(open_image(&img, None, &key(7)).unwrap_err(), ImageError::WrongKey);
    }

    #[test]
    fn overlay_write_then_read() {
        let k = key(8);
        let img = seal_image(&layers(&[("a", 3 * BLOCK_SIZE, 0xAA)]), &k).unwrap();
        let base_bytes = img.to_bytes();
        let mut ov = OverlayFile::new(&img);
        snapshot_write(&mut ov, &img, 0, b"hello overlay", &k).unwrap();

        let open = open_image(&img, Some(&ov), &k).unwrap();
        let b0 = open.read_block(0).unwrap();
        assert_eq!(&b0[..13], b"hello overlay");
        assert!(b0[13..].iter().all(|&b| b == 0));
        assert_eq!(open.read_block(1).unwrap(), [0xAA; BLOCK_SIZE]);
        // Base image bytes untouched.
        assert_eq!(img.to_bytes(), base_bytes);
    }

    #[test]
    fn overlay_last_write_wins_and_is_idempotent() {
        let k = key(9);
        let img = seal_image(&layers(&[("a", BLOCK_SIZE, 0)]), &k).unwrap();
        let mut ov = OverlayFile::new(&img);
        snapshot_write(&mut ov, &img, 0, b"first", &k).unwrap();
        snapshot_write(&mut ov, &img, 0, b"second", &k).unwrap();
        let open = open_image(&img, Some(&ov), &k).unwrap();
        assert_eq!(&open.read_block(0).unwrap()[..6], b"second");
        assert_eq!(ov.dirty_blocks.len(), 1);

        let before = ov.encode();
        snapshot_write(&mut ov, &img, 0, b"second", &k).unwrap();
        assert_eq!(ov.encode(), before);
    }

    #[test]
    fn overlay_bound_to_base_image() {
        let k1 = key(10);
        let k2 = key(11);
        let img1 = seal_image(&layers(&[("a", BLOCK_SIZE, 1)]), &k1).unwrap();
        let img2 = seal_image(&layers(&[("a", BLOCK_SIZE, 2)]), &k2).unwrap();
        let mut ov = OverlayFile::new(&img1);
        snapshot_write(&mut ov, &img1, 0, b"dirty", &k1).unwrap();

        // Copied verbatim to another image: rejected at open.
        assert_eq!(
            open_image(&img2, Some(&ov), &k2).unwrap_err(),
            ImageError::OverlayMismatch
        );

        // Forged base_image_id: the dirty block's tag no longer verifies,
        // because the image id is part of the MAC input.
        let mut forged = ov.clone();
        forged.base_image_id = img2.header.image_id;
        let open = open_image(&img2, Some(&forged), &k2).unwrap();
        assert_eq!(
            open.read_block(0).unwrap_err(),
            ImageError::IntegrityFailure { block: 0 }
        );
    }

    #[test]
    fn overlay_index_out_of_range() {
        let k = key(12);
        let img = seal_image(&layers(&[("a", BLOCK_SIZE, 0)]), &k).unwrap();
        let mut ov = OverlayFile::new(&img);
        assert_eq!(
            snapshot_write(&mut ov, &img, 1, b"x", &k).unwrap_err(),
            ImageError::IndexOutOfRange { index: 1, blocks: 1 }
        );
    }

    #[test]
    fn block_swap_detected() {
        // Swapping two ciphertext blocks (with their tags) must fail both,
        // because the index is inside the MAC input.
        let k = key(13);
        let img = seal_image(&layers(&[("a", 2 * BLOCK_SIZE, 0x31)]), &k).unwrap();
        let mut swapped = img.clone();
        swapped.blocks.swap(0, 1);
        swapped.tags.swap(0, 1);
        let open = open_image(&swapped, None, &k).unwrap();
        assert_eq!(open.read_block(0).unwrap_err(), ImageError::IntegrityFailure { block: 0 });
        assert_eq!(open.read_block(1).unwrap_err(), ImageError::IntegrityFailure { block: 1 });
    }

    #[test]
    fn serialization_idempotent() {
        let k = key(14);
        let ls = layers(&[("base", 5000, 3), ("app", 100, 4), ("cfg", 0, 0)]);
        let img = seal_image(&ls, &k).unwrap();
        let bytes = img.to_bytes();
        let back = SealedImage::from_bytes(&bytes).unwrap();
        assert_eq!(back, img);
        assert_eq!(back.to_bytes(), bytes);

        let mut ov = OverlayFile::new(&img);
        snapshot_write(&mut ov, &img, 1, b"zz", &k).unwrap();
        let ob = ov.encode();
        let oback = OverlayFile::decode(&ob).unwrap();
        assert_eq!(oback, ov);
        assert_eq!(oback.encode(), ob);
    }

    #[test]
    fn truncated_file_rejected() {
        let k = key(15);
        let img = seal_image(&layers(&[("a", 2 * BLOCK_SIZE, 9)]), &k).unwrap();
        let bytes = img.to_bytes();
        assert!(SealedImage::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extended = bytes.clone();
        extended.push(0);
        assert!(SealedImage::from_bytes(&extended).is_err());
    }

    #[test]
    fn empty_layer_list_rejected() {
        assert_eq!(seal_image(&[], &key(16)).unwrap_err(), ImageError::NoLayers);
    }

    #[test]
    fn duplicate_layer_rejected() {
        let ls = layers(&[("a", 10, 0), ("a", 20, 1)]);
        assert_eq!(
            seal_image(&ls, &key(17)).unwrap_err(),
            ImageError::DuplicateLayer("a".into())
        );
    }

    #[test]
    fn verify_image_sweeps_all_blocks() {
        let k = key(18);
        let mut img = seal_image(&layers(&[("a", 3 * BLOCK_SIZE, 0x44)]), &k).unwrap();
        verify_image(&img, &k).unwrap();
        img.blocks[2][100] ^= 1;
        assert_eq!(
            verify_image(&img, &k).unwrap_err(),
            ImageError::IntegrityFailure { block: 2 }
        );
    }

    fn arb_layers() -> impl Strategy<Value = Vec<(String, Vec<u8>)>> {
        prop::collection::vec(prop::collection::vec(any::<u8>(), 0..9000), 1..4).prop_map(|datas| {
            datas
                .into_iter()
                .enumerate()
                .map(|(i, d)| (format!("layer-{i}"), d))
                .collect()
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn round_trip_random_layers(ls in arb_layers(), seed in any::<u8>()) {
            let k = key(seed);
            let img = seal_image(&ls, &k).unwrap();
            let open = open_image(&img, None, &k).unwrap();
            prop_assert_eq!(open.read_all_layers().unwrap(), ls);
        }

        #[test]
        fn key_separation(ls in arb_layers(), s1 in any::<u8>(), s2 in any::<u8>()) {
            prop_assume!(s1 != s2);
            let k1 = key(s1);
            let img = seal_image(&ls, &k1).unwrap();
            let k2 = ImageKey::new(k1.image_id, ImageKey::generate(&mut Entropy::from_seed([s2; 32]), [0; 32]).key_bytes());
            prop_assert_eq!(open_image(&img, None, &k2).unwrap_err(), ImageError::WrongKey);
        }
    }
}
