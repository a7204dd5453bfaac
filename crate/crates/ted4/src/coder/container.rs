//! The `.ted4` bitstream container.
//!
//! Little-endian fixed layout: magic, version, model dimensions, fp32 scene
//! metadata, per-kind symbol bounds, and a four-entry section table (offset,
//! length, CRC32). Sections start at 32-byte-aligned offsets:
//!
//!   0 positions  - fp16 anchor positions, canonical order
//!   1 weights    - deformation bank and all network weights, f32
//!   2 masks      - offset + temporal mask bits, adaptive binary coded
//!   3 attributes - range-coded quantization indices
//!
//! Decoding reproduces every decoder-visible value bit-exactly: steps and
//! distribution parameters are recomputed from the decoded positions and
//! weights through the same arithmetic the encoder used.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::anchor::AnchorConfig;
use crate::coder::range::{build_cdf, crc32, decode_mask, encode_mask, RangeDecoder, RangeEncoder, SymbolCdf};
use crate::entropy::{AttributeKind, FactorizedPrior, KIND_ORDER};
use crate::error::{Error, Result};
use crate::fp16::{f16_bits_to_f64, f64_to_f16_bits};
use crate::model::{build_nets, ModelConfig, PriorKind, QuantizedModel};
use crate::params::{ParamId, ParamStore};

pub const MAGIC: &[u8; 4] = b"TED4";
pub const VERSION: u16 = 1;
const ALIGN: usize = 32;
const N_SECTIONS: usize = 4;
/// Symbol bound cap; indices beyond it go through the escape path.
const MAX_BOUND: i64 = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SectionId {
    Positions = 0,
    Weights = 1,
    Masks = 2,
    Attributes = 3,
}

impl SectionId {
    pub fn name(&self) -> &'static str {
        match self {
            SectionId::Positions => "positions",
            SectionId::Weights => "weights",
            SectionId::Masks => "masks",
            SectionId::Attributes => "attributes",
        }
    }
}

/// Byte accounting parsed from a container.
#[derive(Debug, Clone)]
pub struct ContainerStats {
    pub total_bytes: usize,
    /// Header plus alignment padding: total minus the section payloads.
    pub header_bytes: usize,
    /// (name, bytes) per section in id order.
    pub sections: Vec<(&'static str, usize)>,
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Writer {
        Writer { buf: Vec::new() }
    }
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(data: &'a [u8]) -> Reader<'a> {
        Reader { data, pos: 0 }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Format("truncated container".into()));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn align_to(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

/// Per-kind symbol bounds: max observed index magnitude plus two, capped.
pub fn symbol_bounds(qm: &QuantizedModel) -> Vec<i64> {
    let layout = qm.layout();
    let total = layout.total_dim();
    KIND_ORDER
        .iter()
        .map(|kind| {
            let (off, dim) = layout.range(*kind);
            let mut max_idx = 0i64;
            for a in 0..qm.n_anchors {
                for j in 0..dim {
                    max_idx = max_idx.max(qm.indices[a * total + off + j].abs());
                }
            }
            (max_idx + 2).clamp(2, MAX_BOUND)
        })
        .collect()
}

fn zigzag(v: i64) -> u64 {
    ((v << 1) ^ (v >> 63)) as u64
}

fn unzigzag(v: u64) -> i64 {
    ((v >> 1) as i64) ^ -((v & 1) as i64)
}

fn fm_cdf(fm: &FactorizedPrior, store: &ParamStore, comp: usize, q: f64, bound: i64) -> SymbolCdf {
    let n = (2 * bound + 1) as usize;
    let mut probs = Vec::with_capacity(n + 1);
    let mut mass = 0.0;
    for k in -bound..=bound {
        let center = k as f64 * q;
        let p = (fm.cdf_plain(store, comp, center + 0.5 * q)
            - fm.cdf_plain(store, comp, center - 0.5 * q))
        .max(0.0);
        mass += p;
        probs.push(p);
    }
    probs.push((1.0 - mass).max(0.0));
    SymbolCdf::from_probs(&probs)
}

/// Encode the attribute payload. Exposed with explicit bounds so tests can
/// force the escape path.
pub(crate) fn encode_attributes(qm: &QuantizedModel, bounds: &[i64]) -> Result<Vec<u8>> {
    let layout = qm.layout();
    let total = layout.total_dim();
    let mut enc = RangeEncoder::new();
    for a in 0..qm.n_anchors {
        let coding = qm.coding_params(a)?;
        for (ki, kind) in KIND_ORDER.iter().enumerate() {
            let (off, dim) = layout.range(*kind);
            let bound = bounds[ki];
            let q = coding.q[ki];
            for j in 0..dim {
                let comp = off + j;
                let cdf = match qm.config.prior {
                    PriorKind::Hyper => build_cdf(coding.mu[comp], coding.sigma[comp], q, bound),
                    PriorKind::Factorized => fm_cdf(&qm.nets.fm, &qm.store, comp, q, bound),
                };
                let idx = qm.indices[a * total + comp];
                if idx.abs() <= bound {
                    cdf.encode(&mut enc, (idx + bound) as usize);
                } else {
                    let z = zigzag(idx);
                    if z > u32::MAX as u64 {
                        return Err(Error::Format(format!("index {idx} overflows escape coding")));
                    }
                    cdf.encode(&mut enc, (2 * bound + 1) as usize);
                    enc.encode_bypass((z & 0xFFFF) as u32, 16);
                    enc.encode_bypass((z >> 16) as u32, 16);
                }
            }
        }
    }
    Ok(enc.finish())
}

/// Decode the attribute payload into (attributes, indices), mirroring the
/// encoder's traversal exactly.
pub(crate) fn decode_attributes(
    qm: &mut QuantizedModel,
    bytes: &[u8],
    bounds: &[i64],
) -> Result<()> {
    let layout = qm.layout();
    let total = layout.total_dim();
    let mut dec = RangeDecoder::new(bytes);
    let chunk = qm.nets.ar.chunk;
    let (f_off, f_dim) = layout.range(AttributeKind::Feature);
    for a in 0..qm.n_anchors {
        let base = qm_base_coding(qm, a);
        for (ki, kind) in KIND_ORDER.iter().enumerate() {
            let (off, dim) = layout.range(*kind);
            let bound = bounds[ki];
            let q = base.q[ki];
            if *kind == AttributeKind::Feature && qm.config.prior == PriorKind::Hyper {
                // Chunked decode: each chunk's parameters depend on the
                // already-dequantized earlier chunks.
                let hyper_mu = base.mu[f_off..f_off + f_dim].to_vec();
                let hyper_sigma = base.sigma[f_off..f_off + f_dim].to_vec();
                let sigma_raw = qm_sigma_raw_feature(qm, a);
                let mut decoded = Vec::with_capacity(f_dim);
                for c in 0..qm.nets.ar.n_chunks {
                    let (mu_c, sigma_c) = qm.nets.ar.chunk_params_plain(
                        &qm.store,
                        c,
                        &hyper_mu,
                        &sigma_raw,
                        &hyper_sigma,
                        &decoded,
                    )?;
                    for j in 0..chunk {
                        let idx = decode_one(&mut dec, mu_c[j], sigma_c[j], q, bound)?;
                        let comp = off + c * chunk + j;
                        qm.indices[a * total + comp] = idx;
                        let v = idx as f64 * q;
                        qm.attributes[a * total + comp] = v;
                        decoded.push(v);
                    }
                }
            } else {
                for j in 0..dim {
                    let comp = off + j;
                    let idx = match qm.config.prior {
                        PriorKind::Hyper => {
                            decode_one(&mut dec, base.mu[comp], base.sigma[comp], q, bound)?
                        }
                        PriorKind::Factorized => {
                            let cdf = fm_cdf(&qm.nets.fm, &qm.store, comp, q, bound);
                            decode_symbol(&mut dec, &cdf, bound)?
                        }
                    };
                    qm.indices[a * total + comp] = idx;
                    qm.attributes[a * total + comp] = idx as f64 * q;
                }
            }
        }
    }
    Ok(())
}

fn decode_one(dec: &mut RangeDecoder, mu: f64, sigma: f64, q: f64, bound: i64) -> Result<i64> {
    let cdf = build_cdf(mu, sigma, q, bound);
    decode_symbol(dec, &cdf, bound)
}

fn decode_symbol(dec: &mut RangeDecoder, cdf: &SymbolCdf, bound: i64) -> Result<i64> {
    let sym = cdf.decode(dec);
    if sym == (2 * bound + 1) as usize {
        let lo = dec.decode_bypass(16) as u64;
        let hi = dec.decode_bypass(16) as u64;
        Ok(unzigzag(lo | (hi << 16)))
    } else {
        Ok(sym as i64 - bound)
    }
}

// Free-function mirrors of the QuantizedModel parameter helpers, usable while
// the model is being mutated during decode.
fn qm_base_coding(qm: &QuantizedModel, a: usize) -> crate::model::AnchorCoding {
    let layout = qm.layout();
    let total = layout.total_dim();
    match qm.config.prior {
        PriorKind::Hyper => {
            let pe = crate::model::encode_positions(
                &qm.positions[a * 3..a * 3 + 3],
                1,
                &qm.bbox,
                qm.config.l_pe,
            );
            let out = qm.nets.hyper.params_plain(&qm.store, &pe, 1);
            crate::model::AnchorCoding { mu: out.mu, sigma: out.sigma, q: out.q }
        }
        PriorKind::Factorized => {
            let kinds = layout.kind_count();
            let q = (0..kinds).map(|ki| qm.nets.fm.q_for_kind(&qm.store, ki)).collect();
            crate::model::AnchorCoding { mu: vec![0.0; total], sigma: vec![1.0; total], q }
        }
    }
}

fn qm_sigma_raw_feature(qm: &QuantizedModel, a: usize) -> Vec<f64> {
    let layout = qm.layout();
    let (off, dim) = layout.range(AttributeKind::Feature);
    let pe = crate::model::encode_positions(&qm.positions[a * 3..a * 3 + 3], 1, &qm.bbox, qm.config.l_pe);
    let out = qm.nets.hyper.params_plain(&qm.store, &pe, 1);
    out.sigma_raw[off..off + dim].to_vec()
}

/// Serialize a quantized model into container bytes.
pub fn write_container(qm: &QuantizedModel) -> Result<Vec<u8>> {
    let bounds = symbol_bounds(qm);

    // Section payloads.
    let mut positions = Vec::with_capacity(qm.n_anchors * 6);
    for v in &qm.positions {
        positions.extend_from_slice(&f64_to_f16_bits(*v)?.to_le_bytes());
    }
    let mut weights = Vec::new();
    for i in 0..qm.nets.store_span {
        for v in &qm.store.get(ParamId(i)).data {
            weights.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    let mut mask_bits: Vec<bool> = qm.offset_mask.clone();
    mask_bits.extend(&qm.temporal_mask);
    let masks = encode_mask(&mask_bits);
    let attributes = encode_attributes(qm, &bounds)?;

    // Header.
    let cfg = &qm.config;
    let mut w = Writer::new();
    w.buf.extend_from_slice(MAGIC);
    w.u16(VERSION);
    w.u8(match cfg.prior {
        PriorKind::Hyper => 0,
        PriorKind::Factorized => 1,
    });
    w.u8(cfg.temporal_ablation as u8);
    w.u32(qm.n_anchors as u32);
    w.u16(cfg.anchor.offsets_per_anchor as u16);
    w.u16(cfg.anchor.feature_dim as u16);
    w.u16(cfg.anchor.temporal_dim as u16);
    w.u16(cfg.bank_dim as u16);
    w.u16(qm.frame_count as u16);
    w.u16(cfg.l_pe as u16);
    w.u16(cfg.n_chunks as u16);
    w.u16(cfg.hidden_deform as u16);
    w.u16(cfg.hidden_decoder as u16);
    w.u16(cfg.hidden_hyper as u16);
    w.u16(cfg.hidden_ar as u16);
    w.f32(qm.voxel_size as f32);
    w.f32(qm.lambda_rate as f32);
    w.f32(qm.nets.field.dx_scale as f32);
    for v in qm.bbox {
        w.f32(v as f32);
    }
    for b in &bounds {
        w.u32(*b as u32);
    }
    let table_pos = w.buf.len();
    for _ in 0..N_SECTIONS {
        w.u64(0); // offset
        w.u64(0); // length
        w.u32(0); // crc
    }

    // Lay out sections with alignment and patch the table.
    let mut out = w.buf;
    let payloads = [&positions, &weights, &masks, &attributes];
    let mut entries = Vec::with_capacity(N_SECTIONS);
    for payload in payloads {
        let offset = align_to(out.len());
        out.resize(offset, 0);
        out.extend_from_slice(payload);
        entries.push((offset as u64, payload.len() as u64, crc32(payload)));
    }
    for (i, (off, len, crc)) in entries.iter().enumerate() {
        let p = table_pos + i * 20;
        out[p..p + 8].copy_from_slice(&off.to_le_bytes());
        out[p + 8..p + 16].copy_from_slice(&len.to_le_bytes());
        out[p + 16..p + 20].copy_from_slice(&crc.to_le_bytes());
    }
    Ok(out)
}

struct Header {
    config: ModelConfig,
    n_anchors: usize,
    frame_count: usize,
    voxel_size: f64,
    lambda_rate: f64,
    dx_scale: f64,
    bbox: [f64; 6],
    bounds: Vec<i64>,
    sections: Vec<(usize, usize, u32)>,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let prior = match r.u8()? {
        0 => PriorKind::Hyper,
        1 => PriorKind::Factorized,
        other => return Err(Error::Format(format!("unknown prior kind {other}"))),
    };
    let temporal_ablation = r.u8()? != 0;
    let n_anchors = r.u32()? as usize;
    let k = r.u16()? as usize;
    let d_f = r.u16()? as usize;
    let d = r.u16()? as usize;
    let bank_dim = r.u16()? as usize;
    let frame_count = r.u16()? as usize;
    let l_pe = r.u16()? as usize;
    let n_chunks = r.u16()? as usize;
    let hidden_deform = r.u16()? as usize;
    let hidden_decoder = r.u16()? as usize;
    let hidden_hyper = r.u16()? as usize;
    let hidden_ar = r.u16()? as usize;
    let voxel_size = r.f32()? as f64;
    let lambda_rate = r.f32()? as f64;
    let dx_scale = r.f32()? as f64;
    let mut bbox = [0.0; 6];
    for v in &mut bbox {
        *v = r.f32()? as f64;
    }
    let mut bounds = Vec::with_capacity(KIND_ORDER.len());
    for _ in 0..KIND_ORDER.len() {
        bounds.push(r.u32()? as i64);
    }
    let mut sections = Vec::with_capacity(N_SECTIONS);
    for _ in 0..N_SECTIONS {
        let off = r.u64()? as usize;
        let len = r.u64()? as usize;
        let crc = r.u32()?;
        sections.push((off, len, crc));
    }
    if frame_count < 2 || frame_count % 2 != 0 {
        return Err(Error::Format("bad frame count".into()));
    }
    let config = ModelConfig {
        anchor: AnchorConfig { feature_dim: d_f, temporal_dim: d, offsets_per_anchor: k },
        bank_dim,
        l_pe,
        n_chunks,
        hidden_deform,
        hidden_decoder,
        hidden_hyper,
        hidden_ar,
        dx_scale_factor: if voxel_size > 0.0 { dx_scale / voxel_size } else { 0.0 },
        prior,
        temporal_ablation,
    };
    Ok(Header {
        config,
        n_anchors,
        frame_count,
        voxel_size,
        lambda_rate,
        dx_scale,
        bbox,
        bounds,
        sections,
    })
}

fn section<'a>(bytes: &'a [u8], h: &Header, id: SectionId) -> Result<&'a [u8]> {
    let (off, len, crc) = h.sections[id as usize];
    if off + len > bytes.len() {
        return Err(Error::Format(format!("section {} out of bounds", id.name())));
    }
    let payload = &bytes[off..off + len];
    if crc32(payload) != crc {
        return Err(Error::Format(format!("crc mismatch in section {}", id.name())));
    }
    Ok(payload)
}

/// Deserialize container bytes into the decoder-visible model.
pub fn read_container(bytes: &[u8]) -> Result<QuantizedModel> {
    let h = parse_header(bytes)?;

    // Rebuild the network skeleton; its store order defines the weight layout.
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut nets = build_nets(&mut store, &h.config, h.frame_count, h.voxel_size, &mut rng);
    nets.field.dx_scale = h.dx_scale;

    let weights = section(bytes, &h, SectionId::Weights)?;
    let expected: usize = (0..nets.store_span)
        .map(|i| store.get(ParamId(i)).data.len())
        .sum();
    if weights.len() != expected * 4 {
        return Err(Error::Format(format!(
            "weights section {} bytes, expected {}",
            weights.len(),
            expected * 4
        )));
    }
    let mut wpos = 0;
    for i in 0..nets.store_span {
        let p = store.get_mut(ParamId(i));
        for v in p.data.iter_mut() {
            let raw = f32::from_le_bytes(weights[wpos..wpos + 4].try_into().unwrap());
            *v = raw as f64;
            wpos += 4;
        }
    }

    let positions_raw = section(bytes, &h, SectionId::Positions)?;
    if positions_raw.len() != h.n_anchors * 6 {
        return Err(Error::Format("positions section size mismatch".into()));
    }
    let mut positions = Vec::with_capacity(h.n_anchors * 3);
    for c in positions_raw.chunks_exact(2) {
        positions.push(f16_bits_to_f64(u16::from_le_bytes([c[0], c[1]])));
    }

    let masks_raw = section(bytes, &h, SectionId::Masks)?;
    let k = h.config.anchor.offsets_per_anchor;
    let n_bits = h.n_anchors * k + h.n_anchors;
    let bits = decode_mask(masks_raw, n_bits);
    let offset_mask = bits[..h.n_anchors * k].to_vec();
    let temporal_mask = bits[h.n_anchors * k..].to_vec();

    let layout = h.config.layout();
    let total = layout.total_dim();
    let mut qm = QuantizedModel {
        config: h.config.clone(),
        store,
        nets,
        n_anchors: h.n_anchors,
        frame_count: h.frame_count,
        voxel_size: h.voxel_size,
        bbox: h.bbox,
        lambda_rate: h.lambda_rate,
        positions,
        attributes: vec![0.0; h.n_anchors * total],
        indices: vec![0; h.n_anchors * total],
        offset_mask,
        temporal_mask,
    };
    let attributes_raw = section(bytes, &h, SectionId::Attributes)?;
    decode_attributes(&mut qm, attributes_raw, &h.bounds)?;
    Ok(qm)
}

/// Parse only the header and section table for byte accounting.
pub fn container_stats(bytes: &[u8]) -> Result<ContainerStats> {
    let h = parse_header(bytes)?;
    let mut sections = Vec::new();
    let mut payload_total = 0usize;
    for id in [SectionId::Positions, SectionId::Weights, SectionId::Masks, SectionId::Attributes] {
        let (_, len, _) = h.sections[id as usize];
        sections.push((id.name(), len));
        payload_total += len;
    }
    Ok(ContainerStats {
        total_bytes: bytes.len(),
        header_bytes: bytes.len() - payload_total,
        sections,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::Vec3;
    use crate::model::Model;
    use rand::Rng;

    fn random_model(seed: u64) -> QuantizedModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_pts = rng.gen_range(4..20);
        let points: Vec<Vec3> = (0..n_pts)
            .map(|_| {
                Vec3::new(
                    rng.gen_range(-1.5..1.5),
                    rng.gen_range(-1.5..1.5),
                    rng.gen_range(-1.5..1.5),
                )
            })
            .collect();
        let mut config = crate::model::ModelConfig {
            anchor: AnchorConfig { feature_dim: 8, temporal_dim: 4, offsets_per_anchor: 3 },
            bank_dim: 4,
            l_pe: 2,
            n_chunks: 2,
            hidden_deform: 8,
            hidden_decoder: 8,
            hidden_hyper: 8,
            hidden_ar: 8,
            dx_scale_factor: 0.1,
            prior: PriorKind::Hyper,
            temporal_ablation: false,
        };
        if seed % 3 == 0 {
            config.prior = PriorKind::Factorized;
        }
        if seed % 5 == 0 {
            config.temporal_ablation = true;
        }
        let mut m = Model::init(&points, 10, 0.4, config, 0.004, seed).unwrap();
        // Randomize every parameter so the streams are non-trivial.
        let ids: Vec<_> = m.store.iter().map(|(pid, _)| pid).collect();
        for pid in ids {
            for v in m.store.get_mut(pid).data.iter_mut() {
                *v += rng.gen_range(-0.3..0.3);
            }
        }
        m.finalize().unwrap()
    }

    #[test]
    fn roundtrip_restores_decoder_visible_state() {
        for seed in 0..12 {
            let qm = random_model(seed);
            let bytes = write_container(&qm).unwrap();
            let back = read_container(&bytes).unwrap();
            assert!(qm.state_eq(&back), "state mismatch for seed {seed}");
            // Deterministic re-encode.
            let bytes2 = write_container(&back).unwrap();
            assert_eq!(bytes, bytes2, "re-encode differs for seed {seed}");
        }
    }

    #[test]
    fn tampering_any_section_is_detected() {
        let qm = random_model(1);
        let bytes = write_container(&qm).unwrap();
        let h = parse_header(&bytes).unwrap();
        for (off, len, _) in &h.sections {
            if *len == 0 {
                continue;
            }
            let mut corrupt = bytes.clone();
            corrupt[off + len / 2] ^= 0x40;
            assert!(read_container(&corrupt).is_err());
        }
    }

    #[test]
    fn truncation_and_bad_magic_are_errors() {
        let qm = random_model(2);
        let bytes = write_container(&qm).unwrap();
        assert!(read_container(&bytes[..bytes.len() - 9]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(read_container(&bad).is_err());
        let mut badver = bytes;
        badver[4] = 0xFF;
        assert!(read_container(&badver).is_err());
    }

    #[test]
    fn escape_path_roundtrips_out_of_range_indices() {
        let qm = random_model(3);
        // Force tiny bounds so most symbols escape.
        let bounds = vec![2i64; 5];
        let payload = encode_attributes(&qm, &bounds).unwrap();
        let mut back = qm.clone();
        back.attributes.iter_mut().for_each(|v| *v = 0.0);
        back.indices.iter_mut().for_each(|v| *v = 0);
        decode_attributes(&mut back, &payload, &bounds).unwrap();
        assert_eq!(qm.indices, back.indices);
        let bits = |v: &[f64]| -> Vec<u64> { v.iter().map(|x| x.to_bits()).collect() };
        assert_eq!(bits(&qm.attributes), bits(&back.attributes));
    }

    #[test]
    fn stats_identity_holds() {
        let qm = random_model(4);
        let bytes = write_container(&qm).unwrap();
        let stats = container_stats(&bytes).unwrap();
        let payload: usize = stats.sections.iter().map(|(_, b)| b).sum();
        assert_eq!(stats.total_bytes, bytes.len());
        assert_eq!(stats.header_bytes + payload, stats.total_bytes);
    }

    #[test]
    fn actual_bits_track_the_continuous_estimate() {
        // Even on an untrained model the coded attribute payload must sit
        // within a few percent of the continuous-model estimate.
        let qm = random_model(6);
        let est_bits = qm.estimated_attribute_bits().unwrap();
        let payload = encode_attributes(&qm, &symbol_bounds(&qm)).unwrap();
        let actual_bits = payload.len() as f64 * 8.0;
        assert!(
            actual_bits <= est_bits * 1.02 + 512.0,
            "actual {actual_bits} vs estimate {est_bits}"
        );
        assert!(actual_bits + 64.0 >= est_bits * 0.98, "suspiciously small payload");
    }
}
