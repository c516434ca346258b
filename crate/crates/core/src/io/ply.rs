//! Binary little-endian PLY in the 3DGS checkpoint layout, with optional
//! opacity-SH and LC extensions and a JSON sidecar for scene globals.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, WsrError};
use crate::math::sh::{coeffs_per_channel, ShCoeffs, MAX_SH_DEGREE, SH_C0};
use crate::scene::{GaussianElement, Scene, WeightKind, WeightModel};

/// Scene globals stored next to the PLY as `<path>.wsr.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub weight_model: WeightKind,
    pub sigma: f64,
    pub beta: f64,
    pub background_color: [f64; 3],
    pub background_weight: f64,
    pub sh_degree_color: u8,
    pub sh_degree_opacity: u8,
}

impl Sidecar {
    pub fn from_scene(scene: &Scene) -> Self {
        Self {
            weight_model: scene.weight_model.kind,
            sigma: scene.weight_model.sigma,
            beta: scene.weight_model.beta,
            background_color: scene.background_color,
            background_weight: scene.background_weight,
            sh_degree_color: scene.sh_degree_color,
            sh_degree_opacity: scene.sh_degree_opacity,
        }
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".wsr.json");
    PathBuf::from(s)
}

fn property_names(scene: &Scene) -> Vec<String> {
    let mut names: Vec<String> = ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let rest = coeffs_per_channel(scene.sh_degree_color) - 1;
    names.extend((0..3 * rest).map(|i| format!("f_rest_{i}")));
    names.push("opacity".into());
    names.extend((0..3).map(|i| format!("scale_{i}")));
    names.extend((0..4).map(|i| format!("rot_{i}")));
    let orest = coeffs_per_channel(scene.sh_degree_opacity) - 1;
    names.extend((0..orest).map(|i| format!("o_rest_{i}")));
    names.push("lc_v".into());
    names
}

/// Serialized PLY bytes; identical scenes give identical bytes.
pub fn encode_ply(scene: &Scene) -> Vec<u8> {
    let names = property_names(scene);
    let mut out = Vec::new();
    out.extend_from_slice(b"ply\nformat binary_little_endian 1.0\n");
    out.extend_from_slice(format!("element vertex {}\n", scene.len()).as_bytes());
    for n in &names {
        out.extend_from_slice(format!("property float {n}\n").as_bytes());
    }
    out.extend_from_slice(b"end_header\n");
    let cpc = coeffs_per_channel(scene.sh_degree_color);
    for e in &scene.elements {
        let mut put = |v: f64| out.extend_from_slice(&(v as f32).to_le_bytes());
        e.position.iter().for_each(|&v| put(v));
        (0..3).for_each(|_| put(0.0));
        (0..3).for_each(|ch| put(e.color_sh.channel(ch)[0]));
        for ch in 0..3 {
            e.color_sh.channel(ch)[1..cpc].iter().for_each(|&v| put(v));
        }
        put(e.opacity_sh.values()[0]);
        e.log_scale.iter().for_each(|&v| put(v));
        e.rotation.iter().for_each(|&v| put(v));
        e.opacity_sh.values()[1..].iter().for_each(|&v| put(v));
        put(e.lc_weight);
    }
    out
}

pub fn save_ply(scene: &Scene, path: &Path) -> Result<()> {
    scene.validate()?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| WsrError::io(dir, e))?;
    }
    fs::write(path, encode_ply(scene)).map_err(|e| WsrError::io(path, e))?;
    let side = sidecar_path(path);
    let mut f = fs::File::create(&side).map_err(|e| WsrError::io(&side, e))?;
    serde_json::to_writer_pretty(&mut f, &Sidecar::from_scene(scene))?;
    f.write_all(b"\n").map_err(|e| WsrError::io(&side, e))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum ScalarType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl ScalarType {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    fn read(self, b: &[u8]) -> f64 {
        match self {
            Self::I8 => b[0] as i8 as f64,
            Self::U8 => b[0] as f64,
            Self::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Self::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Self::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

struct Header {
    count: usize,
    props: Vec<(String, ScalarType, usize)>,
    stride: usize,
    body: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    let mut pos = 0usize;
    let next_line = |pos: &mut usize| -> Result<(u64, String)> {
        let start = *pos;
        let end = bytes[start..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| WsrError::parse(start as u64, "unterminated PLY header"))?;
        *pos = start + end + 1;
        let line = std::str::from_utf8(&bytes[start..start + end])
            .map_err(|_| WsrError::parse(start as u64, "PLY header is not UTF-8"))?;
        Ok((start as u64, line.trim_end_matches('\r').to_string()))
    };
    let (off, magic) = next_line(&mut pos)?;
    if magic != "ply" {
        return Err(WsrError::parse(off, "missing `ply` magic"));
    }
    let mut count = None;
    let mut in_vertex = false;
    let mut props = Vec::new();
    let mut stride = 0;
    let mut format_ok = false;
    loop {
        let (off, line) = next_line(&mut pos)?;
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["end_header"] => break,
            ["format", "binary_little_endian", "1.0"] => format_ok = true,
            ["format", other, ..] => {
                return Err(WsrError::parse(off, format!("unsupported PLY format `{other}`")));
            }
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, n] => {
                in_vertex = *name == "vertex";
                if in_vertex {
                    count = Some(
                        n.parse::<usize>()
                            .map_err(|_| WsrError::parse(off, format!("bad vertex count `{n}`")))?,
                    );
                } else if n.parse::<usize>().map_err(|_| WsrError::parse(off, "bad element count"))? != 0 {
                    return Err(WsrError::parse(off, format!("unsupported non-empty element `{name}`")));
                }
            }
            ["property", "list", ..] => {
                if in_vertex {
                    return Err(WsrError::parse(off, "list properties are not supported"));
                }
            }
            ["property", ty, name] => {
                if in_vertex {
                    let t = ScalarType::parse(ty)
                        .ok_or_else(|| WsrError::parse(off, format!("unknown property type `{ty}`")))?;
                    props.push((name.to_string(), t, stride));
                    stride += t.size();
                }
            }
            _ => return Err(WsrError::parse(off, format!("unexpected header line `{line}`"))),
        }
    }
    if !format_ok {
        return Err(WsrError::parse(0, "PLY header lacks `format binary_little_endian 1.0`"));
    }
    let count = count.ok_or_else(|| WsrError::parse(pos as u64, "PLY has no vertex element"))?;
    Ok(Header {
        count,
        props,
        stride,
        body: pos,
    })
}

fn degree_for_rest(rest: usize, channels: usize, what: &str, offset: u64) -> Result<u8> {
    (0..=MAX_SH_DEGREE)
        .find(|&d| channels * (coeffs_per_channel(d) - 1) == rest)
        .ok_or_else(|| WsrError::parse(offset, format!("{rest} {what} coefficients do not form an SH degree <= 3")))
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Parses PLY bytes. `sidecar` supplies the globals when present.
pub fn decode_ply(bytes: &[u8], sidecar: Option<&Sidecar>) -> Result<Scene> {
    let h = parse_header(bytes)?;
    let find = |name: &str| h.props.iter().find(|p| p.0 == name).map(|p| (p.1, p.2));
    let need = |name: &str| {
        find(name).ok_or_else(|| WsrError::parse(h.body as u64, format!("missing required property `{name}`")))
    };
    let count_prefix = |prefix: &str| {
        let mut n = 0;
        while find(&format!("{prefix}{n}")).is_some() {
            n += 1;
        }
        n
    };
    let dc = degree_for_rest(count_prefix("f_rest_"), 3, "f_rest", h.body as u64)?;
    let is_wsr = find("lc_v").is_some();
    let dop = degree_for_rest(count_prefix("o_rest_"), 1, "o_rest", h.body as u64)?;
    if let Some(s) = sidecar {
        if s.sh_degree_color != dc || s.sh_degree_opacity != dop {
            return Err(WsrError::parse(
                h.body as u64,
                format!(
                    "sidecar degrees ({}, {}) disagree with the PLY fields ({dc}, {dop})",
                    s.sh_degree_color, s.sh_degree_opacity
                ),
            ));
        }
    }
    let fields = |names: &[&str]| names.iter().map(|n| need(n)).collect::<Result<Vec<_>>>();
    let pos = fields(&["x", "y", "z"])?;
    let fdc = fields(&["f_dc_0", "f_dc_1", "f_dc_2"])?;
    let opacity = need("opacity")?;
    let scale = fields(&["scale_0", "scale_1", "scale_2"])?;
    let rot = fields(&["rot_0", "rot_1", "rot_2", "rot_3"])?;
    let cpc = coeffs_per_channel(dc);
    let rest: Vec<_> = (0..3 * (cpc - 1)).map(|i| find(&format!("f_rest_{i}")).unwrap()).collect();
    let orest: Vec<_> = (0..coeffs_per_channel(dop) - 1)
        .map(|i| find(&format!("o_rest_{i}")).unwrap())
        .collect();
    let lc = find("lc_v");

    let body = &bytes[h.body..];
    let needed = h.count.checked_mul(h.stride).ok_or_else(|| WsrError::parse(h.body as u64, "vertex count overflows"))?;
    if body.len() < needed {
        let complete = body.len() / h.stride.max(1);
        return Err(WsrError::parse(
            (h.body + complete * h.stride) as u64,
            format!("file ends after {complete} of {} vertices", h.count),
        ));
    }
    if body.len() > needed {
        return Err(WsrError::parse((h.body + needed) as u64, "trailing bytes after the last vertex"));
    }

    let mut scene = match sidecar {
        Some(s) => {
            let mut scene = Scene::empty(
                WeightModel {
                    kind: s.weight_model,
                    sigma: s.sigma,
                    beta: s.beta,
                },
                dc,
                dop,
            );
            scene.background_color = s.background_color;
            scene.background_weight = s.background_weight;
            scene
        }
        None => Scene::empty(WeightModel::initial(WeightKind::Lc), dc, dop),
    };
    scene.elements.reserve(h.count);
    for i in 0..h.count {
        let rec = &body[i * h.stride..(i + 1) * h.stride];
        let get = |(t, off): (ScalarType, usize)| t.read(&rec[off..]);
        let mut color = ShCoeffs::zeros(dc, 3);
        for ch in 0..3 {
            let c = color.channel_mut(ch);
            c[0] = get(fdc[ch]);
            for k in 1..cpc {
                c[k] = get(rest[ch * (cpc - 1) + k - 1]);
            }
        }
        let mut op = ShCoeffs::zeros(dop, 1);
        let raw = get(opacity);
        op.values_mut()[0] = if is_wsr { raw } else { sigmoid(raw) / SH_C0 };
        for (k, &p) in orest.iter().enumerate() {
            op.values_mut()[k + 1] = get(p);
        }
        scene.elements.push(GaussianElement {
            position: [get(pos[0]), get(pos[1]), get(pos[2])],
            rotation: [get(rot[0]), get(rot[1]), get(rot[2]), get(rot[3])],
            log_scale: [get(scale[0]), get(scale[1]), get(scale[2])],
            color_sh: color,
            opacity_sh: op,
            lc_weight: lc.map_or(crate::scene::LC_INIT_V, get),
        });
    }
    scene
        .validate()
        .map_err(|e| WsrError::parse(h.body as u64, format!("decoded scene is invalid: {e}")))?;
    Ok(scene)
}

/// Reads a PLY and its sidecar, if one exists.
pub fn load_ply(path: &Path) -> Result<Scene> {
    let bytes = fs::read(path).map_err(|e| WsrError::io(path, e))?;
    let side = sidecar_path(path);
    let sidecar = if side.exists() {
        let text = fs::read_to_string(&side).map_err(|e| WsrError::io(&side, e))?;
        Some(serde_json::from_str::<Sidecar>(&text)?)
    } else {
        None
    };
    decode_ply(&bytes, sidecar.as_ref())
}
