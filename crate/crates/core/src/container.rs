//! The `.ncgs` bitstream container: quantized features and decoder
//! parameters, entropy coded with two canonical Huffman tables (one per
//! section), behind a little-endian header that carries both quantizer
//! specs and the architecture descriptor. The coding stage is lossless on
//! lattice values and byte-identical across runs.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::decoder::{decoder_forward, output_to_tensor, DecoderArch};
use crate::error::Error;
use crate::grid::TsdfDefTensor;
use crate::huffman::{huffman_build, huffman_decode, huffman_encode, HuffmanTable};
use crate::mc::dmc_extract;
use crate::mesh::TriangleMesh;
use crate::nn::Tensor4;
use crate::quant::QuantSpec;
use crate::train::{read_arch, write_arch};
use crate::Result;

pub const BITSTREAM_MAGIC: &[u8; 4] = b"NCGS";
pub const BITSTREAM_VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompressionReport {
    pub original_bytes: u64,
    pub compressed_bytes: u64,
    pub ratio: f64,
}

impl CompressionReport {
    pub fn new(original_bytes: u64, compressed_bytes: u64) -> Self {
        CompressionReport {
            original_bytes,
            compressed_bytes,
            ratio: original_bytes as f64 / compressed_bytes as f64,
        }
    }
}

/// Decoded bitstream contents; feature and parameter values sit exactly on
/// their quantization lattices.
pub struct DecodedSet {
    pub arch: DecoderArch,
    pub feat_quant: QuantSpec,
    pub param_quant: QuantSpec,
    pub features: Vec<Vec<f64>>,
    pub params: Vec<f64>,
}

fn write_quant(w: &mut impl Write, q: &QuantSpec) -> std::io::Result<()> {
    w.write_f32::<LittleEndian>(q.a as f32)?;
    w.write_f32::<LittleEndian>(q.b as f32)?;
    w.write_u8(q.bits as u8)
}

fn read_quant(r: &mut impl Read) -> Result<QuantSpec> {
    let a = r.read_f32::<LittleEndian>().map_err(fmt_io)? as f64;
    let b = r.read_f32::<LittleEndian>().map_err(fmt_io)? as f64;
    let bits = r.read_u8().map_err(fmt_io)? as u32;
    QuantSpec::new(a, b, bits)
}

fn fmt_io(e: std::io::Error) -> Error {
    Error::Format(format!("truncated bitstream: {e}"))
}

fn levels_of(values: &[f64], spec: &QuantSpec) -> Result<Vec<u32>> {
    values
        .iter()
        .map(|&v| spec.to_level(spec.quantize(v)))
        .collect()
}

fn section(levels: &[u32], alphabet: usize) -> Result<(HuffmanTable, Vec<u8>)> {
    let mut hist = vec![0u64; alphabet];
    for &l in levels {
        hist[l as usize] += 1;
    }
    let table = huffman_build(&hist)?;
    let payload = huffman_encode(levels, &table)?;
    Ok((table, payload))
}

/// Writes the bitstream: header, per-section canonical code lengths,
/// section offsets, then the two payloads.
pub fn compress_set(
    features: &[Vec<f64>],
    params: &[f64],
    arch: &DecoderArch,
    feat_quant: &QuantSpec,
    param_quant: &QuantSpec,
    path: impl AsRef<Path>,
) -> Result<u64> {
    if features.is_empty() {
        return Err(Error::InvalidArgument("no shapes to compress".into()));
    }
    let flen = arch.feature_len();
    for f in features {
        if f.len() != flen {
            return Err(Error::Shape(format!(
                "feature length {} != arch {flen}",
                f.len()
            )));
        }
    }
    if params.len() != arch.param_count() {
        return Err(Error::Shape(format!(
            "param length {} != arch {}",
            params.len(),
            arch.param_count()
        )));
    }

    let mut feat_levels = Vec::with_capacity(features.len() * flen);
    for f in features {
        feat_levels.extend(levels_of(f, feat_quant)?);
    }
    let param_levels = levels_of(params, param_quant)?;
    let (feat_table, feat_payload) = section(&feat_levels, feat_quant.levels())?;
    let (param_table, param_payload) = section(&param_levels, param_quant.levels())?;

    // header assembled in memory first so payload offsets are known
    let mut head = Vec::new();
    head.extend_from_slice(BITSTREAM_MAGIC);
    head.push(BITSTREAM_VERSION);
    write_quant(&mut head, feat_quant).unwrap();
    write_quant(&mut head, param_quant).unwrap();
    write_arch(&mut head, arch).unwrap();
    head.write_u32::<LittleEndian>(features.len() as u32).unwrap();
    head.extend_from_slice(&feat_table.lengths);
    head.extend_from_slice(&param_table.lengths);

    let offsets_at = head.len();
    let feat_off = (offsets_at + 3 * 8) as u64;
    let param_off = feat_off + feat_payload.len() as u64;
    let end_off = param_off + param_payload.len() as u64;
    head.write_u64::<LittleEndian>(feat_off).unwrap();
    head.write_u64::<LittleEndian>(param_off).unwrap();
    head.write_u64::<LittleEndian>(end_off).unwrap();

    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    (|| -> std::io::Result<()> {
        w.write_all(&head)?;
        w.write_all(&feat_payload)?;
        w.write_all(&param_payload)?;
        w.flush()
    })()
    .map_err(|e| Error::io(path, e))?;
    Ok(end_off)
}

/// Reads a bitstream back to lattice-exact features and parameters.
pub fn decompress_set(path: impl AsRef<Path>) -> Result<DecodedSet> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(f);
    let mut data = Vec::new();
    r.read_to_end(&mut data).map_err(|e| Error::io(path, e))?;
    let mut cur = std::io::Cursor::new(&data[..]);

    let mut magic = [0u8; 4];
    cur.read_exact(&mut magic).map_err(fmt_io)?;
    if &magic != BITSTREAM_MAGIC {
        return Err(Error::Format(format!(
            "{}: not a bitstream (bad magic)",
            path.display()
        )));
    }
    let version = cur.read_u8().map_err(fmt_io)?;
    if version != BITSTREAM_VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported bitstream version {version}",
            path.display()
        )));
    }
    let feat_quant = read_quant(&mut cur)?;
    let param_quant = read_quant(&mut cur)?;
    let arch = read_arch(&mut cur)?;
    let count = cur.read_u32::<LittleEndian>().map_err(fmt_io)? as usize;
    if count == 0 {
        return Err(Error::Format("bitstream contains zero shapes".into()));
    }

    let mut feat_table = HuffmanTable {
        lengths: vec![0u8; feat_quant.levels()],
    };
    cur.read_exact(&mut feat_table.lengths).map_err(fmt_io)?;
    let mut param_table = HuffmanTable {
        lengths: vec![0u8; param_quant.levels()],
    };
    cur.read_exact(&mut param_table.lengths).map_err(fmt_io)?;

    let feat_off = cur.read_u64::<LittleEndian>().map_err(fmt_io)?;
    let param_off = cur.read_u64::<LittleEndian>().map_err(fmt_io)?;
    let end_off = cur.read_u64::<LittleEndian>().map_err(fmt_io)?;
    if cur.position() != feat_off || feat_off > param_off || param_off > end_off {
        return Err(Error::Format("section offsets are inconsistent".into()));
    }
    if end_off != data.len() as u64 {
        return Err(Error::Integrity(format!(
            "file length {} != recorded end offset {end_off}",
            data.len()
        )));
    }

    let flen = arch.feature_len();
    let feat_payload = &data[feat_off as usize..param_off as usize];
    let param_payload = &data[param_off as usize..end_off as usize];
    let feat_levels = huffman_decode(feat_payload, &feat_table, count * flen)?;
    let param_levels = huffman_decode(param_payload, &param_table, arch.param_count())?;

    let features = feat_levels
        .chunks_exact(flen)
        .map(|c| c.iter().map(|&l| feat_quant.from_level(l)).collect())
        .collect();
    let params = param_levels
        .iter()
        .map(|&l| param_quant.from_level(l))
        .collect();
    Ok(DecodedSet {
        arch,
        feat_quant,
        param_quant,
        features,
        params,
    })
}

/// Decodes one shape of a decompressed set to its tensor.
pub fn decode_tensor(set: &DecodedSet, index: usize) -> Result<TsdfDefTensor> {
    let feature = Tensor4::from_data(set.arch.feature_dims(), set.features[index].clone())?;
    let (out, _) = decoder_forward(
        &feature,
        &set.params,
        &set.arch,
        &set.feat_quant,
        &set.param_quant,
    )?;
    output_to_tensor(&out)
}

/// Full decode: every shape to a surface mesh.
pub fn decode_meshes(set: &DecodedSet) -> Result<Vec<TriangleMesh>> {
    (0..set.features.len())
        .map(|i| Ok(dmc_extract(&decode_tensor(set, i)?)))
        .collect()
}
