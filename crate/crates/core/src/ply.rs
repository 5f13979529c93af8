//! Binary little-endian splat PLY in the layout written by the reference
//! 3DGS trainer (`x y z nx ny nz f_dc_* f_rest_* opacity scale_* rot_*`),
//! plus an optional `view_id` byte.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{Quaternion, Vector3};

use crate::cloud::GaussianCloud;
use crate::error::{Error, Result};
use crate::sh;

#[derive(Debug, Clone, Copy, PartialEq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn read(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

struct Header {
    count: usize,
    props: Vec<(String, Scalar, usize)>,
    stride: usize,
    body_offset: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    const END: &[u8] = b"end_header\n";
    let end = bytes
        .windows(END.len())
        .position(|w| w == END)
        .ok_or_else(|| Error::Format("missing end_header".into()))?;
    let text = std::str::from_utf8(&bytes[..end]).map_err(|_| Error::Format("header is not utf-8".into()))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err(Error::Format("missing ply magic".into()));
    }
    let mut count = None;
    let mut in_vertex = false;
    let mut props = Vec::new();
    let mut stride = 0;
    for line in lines {
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["format", fmt, _] => {
                if *fmt != "binary_little_endian" {
                    return Err(Error::Format(format!("unsupported ply format {fmt}")));
                }
            }
            ["element", name, n] => {
                in_vertex = *name == "vertex";
                if in_vertex {
                    count = Some(n.parse().map_err(|_| Error::Format(format!("bad vertex count {n}")))?);
                } else if n.parse::<usize>().ok() != Some(0) {
                    return Err(Error::Format(format!("unsupported non-empty element {name}")));
                }
            }
            ["property", "list", ..] => {
                if in_vertex {
                    return Err(Error::Format("list properties are not supported on vertices".into()));
                }
            }
            ["property", ty, name] if in_vertex => {
                let scalar = Scalar::parse(ty).ok_or_else(|| Error::Format(format!("unknown property type {ty}")))?;
                props.push((name.to_string(), scalar, stride));
                stride += scalar.size();
            }
            ["comment", ..] | ["obj_info", ..] | [] | ["property", ..] => {}
            other => return Err(Error::Format(format!("unexpected header line {:?}", other.join(" ")))),
        }
    }
    let count = count.ok_or_else(|| Error::Format("no vertex element".into()))?;
    Ok(Header {
        count,
        props,
        stride,
        body_offset: end + END.len(),
    })
}

/// Reads a splat PLY. Quaternions are renormalized; positions are left
/// untouched (see [`crate::asset::load_asset`] for unit-sphere normalization).
pub fn load_gaussians(path: impl AsRef<Path>) -> Result<GaussianCloud> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_gaussians(&bytes)
}

pub fn decode_gaussians(bytes: &[u8]) -> Result<GaussianCloud> {
    let header = parse_header(bytes)?;
    let find = |name: &str| -> Result<(Scalar, usize)> {
        header
            .props
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, s, o)| (*s, *o))
            .ok_or_else(|| Error::Format(format!("missing property {name}")))
    };
    let rest_count = header.props.iter().filter(|(n, _, _)| n.starts_with("f_rest_")).count();
    if rest_count % 3 != 0 {
        return Err(Error::Format(format!("f_rest count {rest_count} is not a multiple of 3")));
    }
    let nb = rest_count / 3 + 1;
    let degree = (0..=sh::MAX_DEGREE)
        .find(|&d| sh::basis_count(d) == nb)
        .ok_or_else(|| Error::Format(format!("{rest_count} f_rest columns do not form an SH degree <= 3")))?;

    let pos = ["x", "y", "z"].map(find);
    let dc = ["f_dc_0", "f_dc_1", "f_dc_2"].map(find);
    let scale = ["scale_0", "scale_1", "scale_2"].map(find);
    let rot = ["rot_0", "rot_1", "rot_2", "rot_3"].map(find);
    let opacity = find("opacity")?;
    let pos = collect(pos)?;
    let dc = collect(dc)?;
    let scale = collect(scale)?;
    let rot = collect(rot)?;
    let rest = (0..rest_count)
        .map(|k| find(&format!("f_rest_{k}")))
        .collect::<Result<Vec<_>>>()?;
    let view_id = find("view_id").ok();

    let body = &bytes[header.body_offset..];
    if body.len() < header.count * header.stride {
        return Err(Error::Format(format!(
            "body holds {} bytes, expected {}",
            body.len(),
            header.count * header.stride
        )));
    }

    let mut cloud = GaussianCloud::empty(degree);
    if view_id.is_some() {
        cloud.view_ids = Some(Vec::with_capacity(header.count));
    }
    let per_channel = nb - 1;
    for i in 0..header.count {
        let row = &body[i * header.stride..(i + 1) * header.stride];
        let get = |(s, o): (Scalar, usize)| s.read(&row[o..]);
        let mut coeffs = vec![[0.0; 3]; nb];
        coeffs[0] = dc.map(get);
        for (k, c) in coeffs.iter_mut().enumerate().skip(1) {
            for (ch, v) in c.iter_mut().enumerate() {
                *v = get(rest[ch * per_channel + k - 1]);
            }
        }
        let r = rot.map(get);
        let values = pos
            .map(get)
            .into_iter()
            .chain(scale.map(get))
            .chain(r)
            .chain(std::iter::once(get(opacity)))
            .chain(coeffs.iter().flatten().copied());
        if values.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("gaussian {i} has a non-finite field")));
        }
        let q = Quaternion::new(r[0], r[1], r[2], r[3]);
        if q.norm() == 0.0 {
            return Err(Error::Data(format!("gaussian {i} has a zero quaternion")));
        }
        cloud.positions.push(Vector3::from(pos.map(get)));
        cloud.rotations.push(q / q.norm());
        cloud.log_scales.push(Vector3::from(scale.map(get)));
        cloud.opacity_logits.push(get(opacity));
        cloud.sh_coeffs.extend_from_slice(&coeffs);
        if let (Some(ids), Some(v)) = (cloud.view_ids.as_mut(), view_id) {
            let id = get(v);
            if !(0.0..=3.0).contains(&id) {
                return Err(Error::Data(format!("gaussian {i} has view_id {id}")));
            }
            ids.push(id as u8);
        }
    }
    Ok(cloud)
}

fn collect<const N: usize>(items: [Result<(Scalar, usize)>; N]) -> Result<[(Scalar, usize); N]> {
    let mut out = [(Scalar::F32, 0); N];
    for (slot, item) in out.iter_mut().zip(items) {
        *slot = item?;
    }
    Ok(out)
}

pub fn encode_gaussians(cloud: &GaussianCloud) -> Vec<u8> {
    let nb = cloud.basis_count();
    let rest = 3 * (nb - 1);
    let mut header = String::from("ply\nformat binary_little_endian 1.0\n");
    header.push_str(&format!("element vertex {}\n", cloud.len()));
    let mut names: Vec<String> = ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    names.extend((0..rest).map(|k| format!("f_rest_{k}")));
    names.push("opacity".into());
    names.extend(["scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"].map(String::from));
    for n in &names {
        header.push_str(&format!("property float {n}\n"));
    }
    if cloud.view_ids.is_some() {
        header.push_str("property uchar view_id\n");
    }
    header.push_str("end_header\n");

    let row = names.len() * 4 + usize::from(cloud.view_ids.is_some());
    let mut out = Vec::with_capacity(header.len() + row * cloud.len());
    out.extend_from_slice(header.as_bytes());
    fn put(out: &mut Vec<u8>, v: f64) {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    for i in 0..cloud.len() {
        let p = cloud.positions[i];
        let c = cloud.coeffs(i);
        for v in [p.x, p.y, p.z, 0.0, 0.0, 0.0] {
            put(&mut out, v);
        }
        for v in c[0] {
            put(&mut out, v);
        }
        for ch in 0..3 {
            for coeff in &c[1..] {
                put(&mut out, coeff[ch]);
            }
        }
        put(&mut out, cloud.opacity_logits[i]);
        for v in cloud.log_scales[i].iter() {
            put(&mut out, *v);
        }
        let q = cloud.rotations[i];
        let q = q / q.norm();
        for v in [q.w, q.i, q.j, q.k] {
            put(&mut out, v);
        }
        if let Some(ids) = &cloud.view_ids {
            out.push(ids[i]);
        }
    }
    out
}

pub fn save_gaussians(cloud: &GaussianCloud, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    cloud.validate()?;
    let bytes = encode_gaussians(cloud);
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_at_origin() -> GaussianCloud {
        let mut c = GaussianCloud::empty(0);
        c.push_isotropic(Vector3::zeros(), 0.1, 0.7, [0.2, 0.4, 0.6]);
        c
    }

    #[test]
    fn single_gaussian_at_origin() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.ply");
        save_gaussians(&one_at_origin(), &path).unwrap();
        let c = load_gaussians(&path).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c.positions[0], Vector3::zeros());
        assert_eq!(c.rotations[0], Quaternion::identity());
    }

    #[test]
    fn empty_cloud_is_valid_ply() {
        let bytes = encode_gaussians(&GaussianCloud::empty(0));
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert!(text.contains("element vertex 0\n"));
        assert_eq!(decode_gaussians(&bytes).unwrap().len(), 0);
    }

    #[test]
    fn missing_opacity_is_format_error() {
        let bytes = encode_gaussians(&one_at_origin());
        let text = String::from_utf8_lossy(&bytes).into_owned();
        let patched = text.replacen("property float opacity\n", "property float opacitz\n", 1);
        let err = decode_gaussians(patched.as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Format(ref m) if m.contains("opacity")), "{err}");
    }

    #[test]
    fn nan_field_is_data_error() {
        let mut bytes = encode_gaussians(&one_at_origin());
        let body = bytes.len() - 17 * 4;
        bytes[body..body + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode_gaussians(&bytes), Err(Error::Data(_))));
    }

    #[test]
    fn unnormalized_quaternion_saved_normalized() {
        let mut c = one_at_origin();
        c.rotations[0] = Quaternion::new(2.0, 0.0, 2.0, 0.0);
        let back = decode_gaussians(&encode_gaussians(&c)).unwrap();
        let q = back.rotations[0];
        assert!((q.norm() - 1.0).abs() < 1e-6);
        assert!((q.w - 0.5f64.sqrt()).abs() < 1e-6);
    }

    #[test]
    fn degree_three_layout_is_channel_major() {
        let mut c = GaussianCloud::empty(3);
        let coeffs: Vec<[f64; 3]> = (0..16).map(|k| [k as f64, 100.0 + k as f64, 200.0 + k as f64]).collect();
        c.push(Vector3::zeros(), Quaternion::identity(), Vector3::zeros(), 0.0, &coeffs);
        let bytes = encode_gaussians(&c);
        let header = parse_header(&bytes).unwrap();
        let off = header.props.iter().find(|(n, _, _)| n == "f_rest_15").unwrap().2;
        let v = Scalar::F32.read(&bytes[header.body_offset + off..]);
        assert_eq!(v, 101.0);
        assert_eq!(decode_gaussians(&bytes).unwrap().sh_coeffs, c.sh_coeffs);
    }
}
