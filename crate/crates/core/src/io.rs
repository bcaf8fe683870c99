//! On-disk formats.
//!
//! All three files share one layout: a UTF-8 header whose first line is a
//! magic word and a format version, terminated by an empty line, followed by
//! a binary payload.
//!
//! * model (`.ptsm`): little-endian `f32` parameters in header order
//! * mask (`.ptsk`): per-layer packed keep-bits, MSB first, each layer padded
//!   to a byte boundary
//! * calibration set (`.ptsc`): little-endian `f32` samples

use std::fs;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::allocation::SparsityMask;
use crate::graph::{GraphError, Layer, LayerKind, LayerNode, ModelGraph};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MODEL_MAGIC: &str = "PTSM";
pub const MASK_MAGIC: &str = "PTSK";
pub const CALIB_MAGIC: &str = "PTSC";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("malformed header line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("expected {expected} magic, found {found:?}")]
    Magic {
        expected: &'static str,
        found: String,
    },
    #[error("unsupported format version {found} (this build reads {FORMAT_VERSION})")]
    Version { found: String },
    #[error("unknown layer kind {0:?}")]
    UnknownKind(String),
    #[error("payload holds {actual} bytes, header declares {expected}")]
    BlobLength { expected: usize, actual: usize },
    #[error("invalid graph: {0}")]
    Graph(#[from] GraphError),
}

pub type Result<T> = std::result::Result<T, FormatError>;

fn malformed(line: usize, msg: impl Into<String>) -> FormatError {
    FormatError::Malformed {
        line,
        msg: msg.into(),
    }
}

pub fn format_shape(shape: &[usize]) -> String {
    shape
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join("x")
}

pub fn parse_shape(s: &str) -> Option<Vec<usize>> {
    let dims: Option<Vec<usize>> = s
        .split('x')
        .map(|d| d.parse().ok().filter(|&d| d > 0))
        .collect();
    dims.filter(|d| !d.is_empty())
}

/// Reads header lines up to the blank separator; returns them with 1-based line numbers.
fn read_header(r: &mut impl BufRead, magic: &'static str) -> Result<Vec<(usize, String)>> {
    let mut lines = Vec::new();
    let mut buf = String::new();
    let mut lineno = 0;
    loop {
        buf.clear();
        let n = r.read_line(&mut buf)?;
        lineno += 1;
        if n == 0 {
            return Err(malformed(lineno, "header not terminated by an empty line"));
        }
        let line = buf.trim_end_matches(['\n', '\r']);
        if line.is_empty() {
            break;
        }
        lines.push((lineno, line.to_string()));
    }
    let Some((_, first)) = lines.first() else {
        return Err(malformed(1, "empty header"));
    };
    let mut parts = first.split_whitespace();
    let found = parts.next().unwrap_or_default();
    if found != magic {
        return Err(FormatError::Magic {
            expected: magic,
            found: found.to_string(),
        });
    }
    let version = parts.next().unwrap_or_default();
    if version != FORMAT_VERSION.to_string() {
        return Err(FormatError::Version {
            found: version.to_string(),
        });
    }
    Ok(lines.split_off(1))
}

fn read_blob(r: &mut impl Read, expected: usize) -> Result<Vec<u8>> {
    let mut blob = Vec::new();
    r.read_to_end(&mut blob)?;
    if blob.len() != expected {
        return Err(FormatError::BlobLength {
            expected,
            actual: blob.len(),
        });
    }
    Ok(blob)
}

fn push_f32<T: Scalar>(out: &mut Vec<u8>, t: &Tensor<T>) {
    for &v in t.data() {
        out.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
    }
}

fn take_f32<T: Scalar>(blob: &[u8], pos: &mut usize, shape: &[usize]) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = blob[*pos..*pos + 4 * n]
        .chunks_exact(4)
        .map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    *pos += 4 * n;
    Tensor::new(shape.to_vec(), data).expect("shape checked at parse time")
}

// ---------------------------------------------------------------------------
// Model files.

pub fn write_model<T: Scalar>(graph: &ModelGraph<T>, w: &mut impl Write) -> Result<()> {
    let mut header = format!(
        "{MODEL_MAGIC} {FORMAT_VERSION}\ninput {}\nentry {}\nexit {}\n",
        format_shape(graph.input_shape()),
        graph.entry(),
        graph.exit()
    );
    let mut blob = Vec::new();
    for node in graph.nodes() {
        header.push_str(&format!(
            "node {} {} in={}",
            node.id,
            node.kind(),
            node.inputs.join(",")
        ));
        match &node.layer {
            Layer::Dense { weight, bias } => {
                header.push_str(&format!(
                    " weight={} bias={}",
                    format_shape(weight.shape()),
                    format_shape(bias.shape())
                ));
                push_f32(&mut blob, weight);
                push_f32(&mut blob, bias);
            }
            Layer::Conv2d {
                weight,
                bias,
                stride,
                padding,
            } => {
                header.push_str(&format!(
                    " stride={stride} padding={padding} weight={} bias={}",
                    format_shape(weight.shape()),
                    format_shape(bias.shape())
                ));
                push_f32(&mut blob, weight);
                push_f32(&mut blob, bias);
            }
            Layer::BatchNorm2d {
                gamma,
                beta,
                running_mean,
                running_var,
            } => {
                header.push_str(&format!(" channels={}", gamma.numel()));
                for t in [gamma, beta, running_mean, running_var] {
                    push_f32(&mut blob, t);
                }
            }
            Layer::AvgPool2d { kernel } => header.push_str(&format!(" kernel={kernel}")),
            Layer::Relu | Layer::ResidualAdd | Layer::Flatten => {}
        }
        header.push('\n');
    }
    header.push('\n');
    w.write_all(header.as_bytes())?;
    w.write_all(&blob)?;
    Ok(())
}

struct NodeDecl {
    id: String,
    kind: LayerKind,
    inputs: Vec<String>,
    attrs: Vec<(String, String)>,
    line: usize,
}

impl NodeDecl {
    fn attr(&self, key: &str) -> Result<&str> {
        self.attrs
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| malformed(self.line, format!("node {:?} lacks {key}=", self.id)))
    }

    fn usize_attr(&self, key: &str) -> Result<usize> {
        self.attr(key)?
            .parse()
            .map_err(|_| malformed(self.line, format!("{key} must be a non-negative integer")))
    }

    fn shape_attr(&self, key: &str) -> Result<Vec<usize>> {
        parse_shape(self.attr(key)?)
            .ok_or_else(|| malformed(self.line, format!("bad shape for {key}")))
    }

    /// Parameter shapes in blob order.
    fn param_shapes(&self) -> Result<Vec<Vec<usize>>> {
        Ok(match self.kind {
            LayerKind::Dense | LayerKind::Conv2d => {
                vec![self.shape_attr("weight")?, self.shape_attr("bias")?]
            }
            LayerKind::BatchNorm2d => {
                let c = self.usize_attr("channels")?;
                vec![vec![c]; 4]
            }
            _ => Vec::new(),
        })
    }
}

pub fn read_model<T: Scalar>(r: &mut impl Read) -> Result<ModelGraph<T>> {
    let mut r = BufReader::new(r);
    let lines = read_header(&mut r, MODEL_MAGIC)?;
    let mut input_shape = None;
    let mut entry = None;
    let mut exit = None;
    let mut decls = Vec::new();
    for (line, text) in &lines {
        let mut parts = text.split_whitespace();
        match parts.next() {
            Some("input") => {
                let s = parts
                    .next()
                    .ok_or_else(|| malformed(*line, "input needs a shape"))?;
                input_shape =
                    Some(parse_shape(s).ok_or_else(|| malformed(*line, "bad input shape"))?);
            }
            Some("entry") => entry = parts.next().map(str::to_string),
            Some("exit") => exit = parts.next().map(str::to_string),
            Some("node") => {
                let id = parts
                    .next()
                    .ok_or_else(|| malformed(*line, "node needs an id"))?
                    .to_string();
                let kind_s = parts
                    .next()
                    .ok_or_else(|| malformed(*line, "node needs a kind"))?;
                let kind: LayerKind = kind_s.parse().map_err(FormatError::UnknownKind)?;
                let mut inputs = Vec::new();
                let mut attrs = Vec::new();
                for kv in parts {
                    let (k, v) = kv.split_once('=').ok_or_else(|| {
                        malformed(*line, format!("expected key=value, got {kv:?}"))
                    })?;
                    if k == "in" {
                        inputs = v
                            .split(',')
                            .filter(|s| !s.is_empty())
                            .map(str::to_string)
                            .collect();
                    } else {
                        attrs.push((k.to_string(), v.to_string()));
                    }
                }
                decls.push(NodeDecl {
                    id,
                    kind,
                    inputs,
                    attrs,
                    line: *line,
                });
            }
            Some(other) => return Err(malformed(*line, format!("unknown header key {other:?}"))),
            None => {}
        }
    }
    let input_shape = input_shape.ok_or_else(|| malformed(0, "missing input line"))?;
    let entry = entry.ok_or_else(|| malformed(0, "missing entry line"))?;
    let exit = exit.ok_or_else(|| malformed(0, "missing exit line"))?;

    let mut expected = 0;
    let mut shapes = Vec::with_capacity(decls.len());
    for d in &decls {
        let s = d.param_shapes()?;
        expected += s
            .iter()
            .map(|s| 4 * s.iter().product::<usize>())
            .sum::<usize>();
        shapes.push(s);
    }
    let blob = read_blob(&mut r, expected)?;
    let mut pos = 0;
    let mut nodes = Vec::with_capacity(decls.len());
    for (d, s) in decls.iter().zip(&shapes) {
        let mut params = s.iter().map(|sh| take_f32::<T>(&blob, &mut pos, sh));
        let mut next = || params.next().expect("declared parameter");
        let layer = match d.kind {
            LayerKind::Dense => Layer::Dense {
                weight: next(),
                bias: next(),
            },
            LayerKind::Conv2d => {
                let (weight, bias) = (next(), next());
                Layer::Conv2d {
                    weight,
                    bias,
                    stride: d.usize_attr("stride")?,
                    padding: d.usize_attr("padding")?,
                }
            }
            LayerKind::BatchNorm2d => Layer::BatchNorm2d {
                gamma: next(),
                beta: next(),
                running_mean: next(),
                running_var: next(),
            },
            LayerKind::Relu => Layer::Relu,
            LayerKind::AvgPool2d => Layer::AvgPool2d {
                kernel: d.usize_attr("kernel")?,
            },
            LayerKind::ResidualAdd => Layer::ResidualAdd,
            LayerKind::Flatten => Layer::Flatten,
        };
        nodes.push(LayerNode {
            id: d.id.clone(),
            layer,
            inputs: d.inputs.clone(),
        });
    }
    Ok(ModelGraph::new(input_shape, nodes, entry, exit)?)
}

pub fn save_model<T: Scalar>(graph: &ModelGraph<T>, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_model(graph, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_model<T: Scalar>(path: impl AsRef<Path>) -> Result<ModelGraph<T>> {
    let bytes = fs::read(path)?;
    read_model(&mut bytes.as_slice())
}

// ---------------------------------------------------------------------------
// Mask files.

pub fn write_masks(mask: &SparsityMask, w: &mut impl Write) -> Result<()> {
    let mut header = format!("{MASK_MAGIC} {FORMAT_VERSION}\n");
    let mut blob = Vec::new();
    for (id, keep) in mask.iter() {
        header.push_str(&format!("layer {} {}\n", id, keep.len()));
        for chunk in keep.chunks(8) {
            let mut byte = 0u8;
            for (i, &k) in chunk.iter().enumerate() {
                if k {
                    byte |= 0x80 >> i;
                }
            }
            blob.push(byte);
        }
    }
    header.push('\n');
    w.write_all(header.as_bytes())?;
    w.write_all(&blob)?;
    Ok(())
}

pub fn read_masks(r: &mut impl Read) -> Result<SparsityMask> {
    let mut r = BufReader::new(r);
    let lines = read_header(&mut r, MASK_MAGIC)?;
    let mut layers = Vec::new();
    for (line, text) in &lines {
        let parts: Vec<&str> = text.split_whitespace().collect();
        match parts.as_slice() {
            ["layer", id, count] => {
                let n: usize = count
                    .parse()
                    .map_err(|_| malformed(*line, "bad element count"))?;
                layers.push((id.to_string(), n));
            }
            _ => {
                return Err(malformed(
                    *line,
                    format!("expected `layer <id> <count>`, got {text:?}"),
                ))
            }
        }
    }
    let expected = layers.iter().map(|(_, n)| n.div_ceil(8)).sum();
    let blob = read_blob(&mut r, expected)?;
    let mut mask = SparsityMask::default();
    let mut pos = 0;
    for (id, n) in layers {
        let bytes = &blob[pos..pos + n.div_ceil(8)];
        pos += bytes.len();
        let keep = (0..n)
            .map(|i| bytes[i / 8] & (0x80 >> (i % 8)) != 0)
            .collect();
        mask.insert(id, keep);
    }
    Ok(mask)
}

pub fn save_masks(mask: &SparsityMask, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_masks(mask, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_masks(path: impl AsRef<Path>) -> Result<SparsityMask> {
    let bytes = fs::read(path)?;
    read_masks(&mut bytes.as_slice())
}

// ---------------------------------------------------------------------------
// Calibration sets.

pub fn write_calibration<T: Scalar>(samples: &Tensor<T>, w: &mut impl Write) -> Result<()> {
    let header = format!(
        "{CALIB_MAGIC} {FORMAT_VERSION}\ncount {}\nshape {}\n\n",
        samples.shape()[0],
        format_shape(&samples.shape()[1..])
    );
    let mut blob = Vec::new();
    push_f32(&mut blob, samples);
    w.write_all(header.as_bytes())?;
    w.write_all(&blob)?;
    Ok(())
}

/// Reads a calibration file as one `[count × shape…]` tensor.
pub fn read_calibration<T: Scalar>(r: &mut impl Read) -> Result<Tensor<T>> {
    let mut r = BufReader::new(r);
    let lines = read_header(&mut r, CALIB_MAGIC)?;
    let mut count = None;
    let mut shape = None;
    for (line, text) in &lines {
        match text.split_whitespace().collect::<Vec<_>>().as_slice() {
            ["count", n] => {
                count = Some(
                    n.parse::<usize>()
                        .map_err(|_| malformed(*line, "bad count"))?,
                )
            }
            ["shape", s] => {
                shape = Some(parse_shape(s).ok_or_else(|| malformed(*line, "bad shape"))?)
            }
            _ => return Err(malformed(*line, format!("unexpected header line {text:?}"))),
        }
    }
    let count = count
        .filter(|&c| c > 0)
        .ok_or_else(|| malformed(0, "missing or zero count"))?;
    let mut full = vec![count];
    full.extend(shape.ok_or_else(|| malformed(0, "missing shape"))?);
    let n: usize = full.iter().product();
    let blob = read_blob(&mut r, 4 * n)?;
    Ok(take_f32(&blob, &mut 0, &full))
}

pub fn save_calibration<T: Scalar>(samples: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_calibration(samples, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_calibration<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let bytes = fs::read(path)?;
    read_calibration(&mut bytes.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::GRAPH_INPUT;

    fn tiny() -> ModelGraph<f64> {
        let nodes = vec![
            LayerNode::new("f", Layer::Flatten, &[GRAPH_INPUT]),
            LayerNode::new(
                "fc",
                Layer::Dense {
                    weight: Tensor::new(vec![2, 3], vec![0.5, -1.25, 2.0, 0.125, 3.0, -0.75])
                        .unwrap(),
                    bias: Tensor::new(vec![2], vec![0.25, -0.5]).unwrap(),
                },
                &["f"],
            ),
        ];
        ModelGraph::new(vec![3], nodes, "f", "fc").unwrap()
    }

    fn bytes(g: &ModelGraph<f64>) -> Vec<u8> {
        let mut buf = Vec::new();
        write_model(g, &mut buf).unwrap();
        buf
    }

    #[test]
    fn model_round_trip() {
        let g = tiny();
        let buf = bytes(&g);
        let back: ModelGraph<f64> = read_model(&mut buf.as_slice()).unwrap();
        assert_eq!(back, g);
        assert_eq!(bytes(&back), buf);
    }

    #[test]
    fn truncated_blob() {
        let mut buf = bytes(&tiny());
        buf.truncate(buf.len() - 3);
        assert!(matches!(
            read_model::<f64>(&mut buf.as_slice()),
            Err(FormatError::BlobLength { .. })
        ));
    }

    #[test]
    fn unknown_kind() {
        let text =
            String::from_utf8_lossy(&bytes(&tiny())).replace("node f flatten", "node f lstm");
        let err = read_model::<f64>(&mut text.as_bytes()).unwrap_err();
        assert!(matches!(err, FormatError::UnknownKind(k) if k == "lstm"));
    }

    #[test]
    fn version_mismatch() {
        let mut buf = bytes(&tiny());
        buf[5] = b'9';
        assert!(matches!(
            read_model::<f64>(&mut buf.as_slice()),
            Err(FormatError::Version { .. })
        ));
    }

    #[test]
    fn missing_separator_is_malformed() {
        let text = "PTSM 1\ninput 3\n";
        assert!(matches!(
            read_model::<f64>(&mut text.as_bytes()),
            Err(FormatError::Malformed { .. })
        ));
    }

    #[test]
    fn mask_bits_are_msb_first_and_padded() {
        let mut m = SparsityMask::default();
        m.insert(
            "a".into(),
            vec![true, false, true, true, false, false, false, false, true],
        );
        m.insert("b".into(), vec![false, true]);
        let mut buf = Vec::new();
        write_masks(&m, &mut buf).unwrap();
        let header = "PTSK 1\nlayer a 9\nlayer b 2\n\n";
        assert_eq!(&buf[..header.len()], header.as_bytes());
        assert_eq!(
            &buf[header.len()..],
            &[0b1011_0000, 0b1000_0000, 0b0100_0000]
        );
        assert_eq!(read_masks(&mut buf.as_slice()).unwrap(), m);
    }

    #[test]
    fn calibration_round_trip() {
        let x = Tensor::<f64>::from_fn(&[3, 1, 2, 2], |i| i as f64 * 0.25);
        let mut buf = Vec::new();
        write_calibration(&x, &mut buf).unwrap();
        assert_eq!(read_calibration::<f64>(&mut buf.as_slice()).unwrap(), x);
        buf.pop();
        assert!(read_calibration::<f64>(&mut buf.as_slice()).is_err());
    }
}
