//! Model file format.
//!
//! Layout: 4-byte magic "FSCV", little-endian u32 version, little-endian u32
//! manifest length, UTF-8 JSON manifest (input shape, seed, trained flag,
//! layer specs with freeze flags), then every parameter tensor as raw
//! little-endian f32 in row-major order — weights then bias, in layer order.
//! Round-trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::IxDyn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{expected_param_shapes, propagate_shapes, Layer, LayerSpec, Network};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"FSCV";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Manifest {
    input_shape: Vec<usize>,
    rng_seed: u64,
    trained: bool,
    layers: Vec<LayerSpec>,
}

pub fn save(net: &Network<f32>, path: &Path) -> Result<()> {
    let file = File::create(path)?;
    save_writer(net, BufWriter::new(file))
}

pub fn save_writer<W: Write>(net: &Network<f32>, mut w: W) -> Result<()> {
    let manifest = Manifest {
        input_shape: net.input_shape().to_vec(),
        rng_seed: net.rng_seed(),
        trained: net.trained(),
        layers: net.layers().iter().map(|l| l.spec().clone()).collect(),
    };
    let manifest_json = serde_json::to_vec(&manifest)?;
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(manifest_json.len() as u32).to_le_bytes())?;
    w.write_all(&manifest_json)?;
    for layer in net.layers() {
        for tensor in [layer.weights(), layer.bias()].into_iter().flatten() {
            for v in tensor.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Network<f32>> {
    let file = File::open(path)?;
    load_reader(BufReader::new(file))
}

pub fn load_reader<R: Read>(mut r: R) -> Result<Network<f32>> {
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic)?;
    if magic != MAGIC {
        return Err(Error::Model("bad magic, not a model file".into()));
    }
    let mut word = [0u8; 4];
    read_exact(&mut r, &mut word)?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(Error::Model(format!(
            "unsupported model version {version} (expected {VERSION})"
        )));
    }
    read_exact(&mut r, &mut word)?;
    let manifest_len = u32::from_le_bytes(word) as usize;
    let mut manifest_bytes = vec![0u8; manifest_len];
    read_exact(&mut r, &mut manifest_bytes)?;
    let manifest: Manifest = serde_json::from_slice(&manifest_bytes)
        .map_err(|e| Error::Model(format!("bad manifest: {e}")))?;

    // Parameter tensor shapes are implied by the layer stack.
    propagate_shapes(&manifest.input_shape, &manifest.layers)?;
    let mut in_shape = manifest.input_shape.clone();
    let mut layers = Vec::with_capacity(manifest.layers.len());
    for spec in &manifest.layers {
        let (w_shape, b_shape) = expected_param_shapes(&spec.kind, &in_shape);
        let weights = w_shape.map(|s| read_tensor(&mut r, &s)).transpose()?;
        let bias = b_shape.map(|s| read_tensor(&mut r, &s)).transpose()?;
        let out_shape = propagate_shapes(&in_shape, std::slice::from_ref(spec))?;
        in_shape = out_shape.into_iter().next().expect("one layer");
        layers.push(Layer {
            spec: spec.clone(),
            weights,
            bias,
        });
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Model("trailing bytes after parameters".into()));
    }
    Network::from_parts(
        &manifest.input_shape,
        layers,
        manifest.rng_seed,
        manifest.trained,
    )
}

fn read_tensor<R: Read>(r: &mut R, shape: &[usize]) -> Result<Tensor<f32>> {
    let len: usize = shape.iter().product();
    let mut bytes = vec![0u8; len * 4];
    read_exact(r, &mut bytes)?;
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Tensor::from_shape_vec(IxDyn(shape), data).expect("sizes agree"))
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Model("truncated model file".into())
        } else {
            Error::Io(e)
        }
    })
}
