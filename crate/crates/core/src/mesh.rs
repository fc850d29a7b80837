//! Triangulated closed surfaces carrying the nodal P1 basis.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;

/// Triangles with area at or below this are rejected.
pub const MIN_TRIANGLE_AREA: f64 = 1e-12;
pub const MAX_ICOSPHERE_SUBDIVISIONS: u32 = 7;

/// A validated triangulated surface. Nodes are 0-indexed.
#[derive(Debug, Clone, PartialEq)]
pub struct TriMesh {
    nodes: Vec<[f64; 3]>,
    triangles: Vec<[usize; 3]>,
    closed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeshStats {
    pub node_count: usize,
    pub triangle_count: usize,
    pub total_area: f64,
    pub min_triangle_area: f64,
    pub is_closed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MeshFormat {
    /// Single OFF text file.
    Off,
    /// Directory holding `nodes.csv` and `triangles.csv`.
    CsvPair,
    /// Directory holding `nodes.ipca` and `triangles.ipca`.
    Container,
}

impl MeshFormat {
    /// Guess from a path: `.off` files are OFF, directories are probed for either pair.
    pub fn detect(path: &Path) -> Option<Self> {
        if path.is_dir() {
            if path.join("nodes.ipca").exists() {
                Some(MeshFormat::Container)
            } else if path.join("nodes.csv").exists() {
                Some(MeshFormat::CsvPair)
            } else {
                None
            }
        } else {
            match path.extension().and_then(|e| e.to_str()) {
                Some(e) if e.eq_ignore_ascii_case("off") => Some(MeshFormat::Off),
                _ => None,
            }
        }
    }
}

fn tri_area(a: &[f64; 3], b: &[f64; 3], c: &[f64; 3]) -> f64 {
    let (a, b, c) = (Vector3::from(*a), Vector3::from(*b), Vector3::from(*c));
    0.5 * (b - a).cross(&(c - a)).norm()
}

impl TriMesh {
    pub fn new(nodes: Vec<[f64; 3]>, triangles: Vec<[usize; 3]>) -> Result<Self> {
        let n = nodes.len();
        if let Some(p) = nodes.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::InvalidMesh(format!("node {p} has a non-finite coordinate")));
        }
        if triangles.is_empty() {
            return Err(Error::InvalidMesh("mesh has no triangles".into()));
        }
        let mut edge_use: HashMap<(usize, usize), u32> = HashMap::new();
        for (t, tri) in triangles.iter().enumerate() {
            if let Some(&i) = tri.iter().find(|&&i| i >= n) {
                return Err(Error::InvalidMesh(format!(
                    "triangle {t} references node {i}, mesh has {n} nodes"
                )));
            }
            if tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2] {
                return Err(Error::InvalidMesh(format!("triangle {t} repeats a node index")));
            }
            let area = tri_area(&nodes[tri[0]], &nodes[tri[1]], &nodes[tri[2]]);
            if !(area > MIN_TRIANGLE_AREA) {
                return Err(Error::InvalidMesh(format!("triangle {t} is degenerate (area {area:e})")));
            }
            for k in 0..3 {
                let (a, b) = (tri[k], tri[(k + 1) % 3]);
                *edge_use.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        let closed = edge_use.values().all(|&c| c == 2);
        Ok(TriMesh { nodes, triangles, closed })
    }

    pub fn nodes(&self) -> &[[f64; 3]] {
        &self.nodes
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t];
        tri_area(&self.nodes[a], &self.nodes[b], &self.nodes[c])
    }

    /// Unique undirected edges, sorted.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut e: Vec<(usize, usize)> = self
            .triangles
            .iter()
            .flat_map(|t| (0..3).map(move |k| (t[k].min(t[(k + 1) % 3]), t[k].max(t[(k + 1) % 3]))))
            .collect();
        e.sort_unstable();
        e.dedup();
        e
    }

    /// Sorted one-ring neighbour lists.
    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.nodes.len()];
        for (a, b) in self.edges() {
            adj[a].push(b);
            adj[b].push(a);
        }
        for l in &mut adj {
            l.sort_unstable();
        }
        adj
    }

    /// Lumped (row-sum) mass per node: one third of the incident triangle areas.
    pub fn vertex_areas(&self) -> Vec<f64> {
        let mut w = vec![0.0; self.nodes.len()];
        for (t, tri) in self.triangles.iter().enumerate() {
            let a = self.triangle_area(t) / 3.0;
            for &i in tri {
                w[i] += a;
            }
        }
        w
    }

    pub fn stats(&self) -> MeshStats {
        mesh_stats(self)
    }
}

pub fn mesh_stats(mesh: &TriMesh) -> MeshStats {
    let areas: Vec<f64> = (0..mesh.triangles.len()).map(|t| mesh.triangle_area(t)).collect();
    MeshStats {
        node_count: mesh.nodes.len(),
        triangle_count: mesh.triangles.len(),
        total_area: areas.iter().sum(),
        min_triangle_area: areas.iter().copied().fold(f64::INFINITY, f64::min),
        is_closed: mesh.closed,
    }
}

/// Subdivided icosahedron projected onto the sphere of the given radius.
/// Has `10 * 4^subdivisions + 2` nodes.
pub fn make_icosphere(subdivisions: u32, radius: f64) -> Result<TriMesh> {
    if subdivisions > MAX_ICOSPHERE_SUBDIVISIONS {
        return Err(Error::LimitExceeded(format!(
            "icosphere subdivisions {subdivisions} > {MAX_ICOSPHERE_SUBDIVISIONS}"
        )));
    }
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::InvalidMesh(format!("radius must be positive, got {radius}")));
    }
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut verts: Vec<Vector3<f64>> = [
        [-1.0, t, 0.0],
        [1.0, t, 0.0],
        [-1.0, -t, 0.0],
        [1.0, -t, 0.0],
        [0.0, -1.0, t],
        [0.0, 1.0, t],
        [0.0, -1.0, -t],
        [0.0, 1.0, -t],
        [t, 0.0, -1.0],
        [t, 0.0, 1.0],
        [-t, 0.0, -1.0],
        [-t, 0.0, 1.0],
    ]
    .iter()
    .map(|p| Vector3::from(*p).normalize())
    .collect();
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut midpoint: HashMap<(usize, usize), usize> = HashMap::new();
        let mut mid = |a: usize, b: usize, verts: &mut Vec<Vector3<f64>>| -> usize {
            *midpoint.entry((a.min(b), a.max(b))).or_insert_with(|| {
                verts.push(((verts[a] + verts[b]) * 0.5).normalize());
                verts.len() - 1
            })
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for [a, b, c] in faces {
            let ab = mid(a, b, &mut verts);
            let bc = mid(b, c, &mut verts);
            let ca = mid(c, a, &mut verts);
            next.extend_from_slice(&[[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    let nodes = verts.iter().map(|v| (v * radius).into()).collect();
    TriMesh::new(nodes, faces)
}

pub fn load_mesh(path: impl AsRef<Path>, format: MeshFormat) -> Result<TriMesh> {
    let path = path.as_ref();
    match format {
        MeshFormat::Off => parse_off(&fs::read_to_string(path)?),
        MeshFormat::CsvPair => {
            let nodes = io::read_csv_matrix(path.join("nodes.csv"))?;
            let tris = io::read_csv_matrix(path.join("triangles.csv"))?;
            from_matrices(&nodes, &tris)
        }
        MeshFormat::Container => {
            let nodes = io::read_container(path.join("nodes.ipca"))?;
            let tris = io::read_container(path.join("triangles.ipca"))?;
            from_matrices(&nodes, &tris)
        }
    }
}

pub fn write_mesh(mesh: &TriMesh, path: impl AsRef<Path>, format: MeshFormat) -> Result<()> {
    let path = path.as_ref();
    match format {
        MeshFormat::Off => fs::write(path, to_off(mesh))?,
        MeshFormat::CsvPair => {
            fs::create_dir_all(path)?;
            let (n, t) = to_matrices(mesh);
            io::write_csv_matrix(path.join("nodes.csv"), &[], &n)?;
            io::write_csv_matrix(path.join("triangles.csv"), &[], &t)?;
        }
        MeshFormat::Container => {
            fs::create_dir_all(path)?;
            let (n, t) = to_matrices(mesh);
            io::write_container(path.join("nodes.ipca"), &n)?;
            io::write_container(path.join("triangles.ipca"), &t)?;
        }
    }
    Ok(())
}

fn to_matrices(mesh: &TriMesh) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = DMatrix::from_fn(mesh.nodes.len(), 3, |i, j| mesh.nodes[i][j]);
    let t = DMatrix::from_fn(mesh.triangles.len(), 3, |i, j| mesh.triangles[i][j] as f64);
    (n, t)
}

fn from_matrices(nodes: &DMatrix<f64>, tris: &DMatrix<f64>) -> Result<TriMesh> {
    if nodes.ncols() != 3 || tris.ncols() != 3 {
        return Err(Error::Parse(format!(
            "expected 3 columns for nodes and triangles, got {} and {}",
            nodes.ncols(),
            tris.ncols()
        )));
    }
    let nodes = (0..nodes.nrows()).map(|i| [nodes[(i, 0)], nodes[(i, 1)], nodes[(i, 2)]]).collect();
    let mut out = Vec::with_capacity(tris.nrows());
    for i in 0..tris.nrows() {
        let mut tri = [0usize; 3];
        for j in 0..3 {
            let v = tris[(i, j)];
            if v < 0.0 || v.fract() != 0.0 || !v.is_finite() {
                return Err(Error::Parse(format!("triangle {i} has non-integer index {v}")));
            }
            tri[j] = v as usize;
        }
        out.push(tri);
    }
    TriMesh::new(nodes, out)
}

/// Parses OFF text. Only triangular faces are accepted; indices are 0-based.
pub fn parse_off(text: &str) -> Result<TriMesh> {
    let mut tokens = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or(""))
        .flat_map(str::split_whitespace);
    match tokens.next() {
        Some("OFF") => {}
        other => return Err(Error::Parse(format!("expected OFF header, got {other:?}"))),
    }
    let mut next_num = |what: &str| -> Result<&str> {
        tokens.next().ok_or_else(|| Error::Parse(format!("unexpected end of file reading {what}")))
    };
    let parse_usize = |s: &str| s.parse::<usize>().map_err(|e| Error::Parse(format!("{s:?}: {e}")));
    let parse_f64 = |s: &str| s.parse::<f64>().map_err(|e| Error::Parse(format!("{s:?}: {e}")));
    let nv = parse_usize(next_num("vertex count")?)?;
    let nf = parse_usize(next_num("face count")?)?;
    let _ne = parse_usize(next_num("edge count")?)?;
    let mut nodes = Vec::with_capacity(nv);
    for _ in 0..nv {
        let x = parse_f64(next_num("coordinate")?)?;
        let y = parse_f64(next_num("coordinate")?)?;
        let z = parse_f64(next_num("coordinate")?)?;
        nodes.push([x, y, z]);
    }
    let mut tris = Vec::with_capacity(nf);
    for f in 0..nf {
        let k = parse_usize(next_num("face size")?)?;
        if k != 3 {
            return Err(Error::Parse(format!("face {f} has {k} vertices, only triangles are supported")));
        }
        let a = parse_usize(next_num("face index")?)?;
        let b = parse_usize(next_num("face index")?)?;
        let c = parse_usize(next_num("face index")?)?;
        tris.push([a, b, c]);
    }
    TriMesh::new(nodes, tris)
}

pub fn to_off(mesh: &TriMesh) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "OFF");
    let _ = writeln!(s, "{} {} {}", mesh.nodes.len(), mesh.triangles.len(), mesh.edges().len());
    for p in &mesh.nodes {
        let _ = writeln!(s, "{:?} {:?} {:?}", p[0], p[1], p[2]);
    }
    for t in &mesh.triangles {
        let _ = writeln!(s, "3 {} {} {}", t[0], t[1], t[2]);
    }
    s
}

#[cfg(test)]
pub(crate) fn tetrahedron() -> TriMesh {
    let s = 1.0 / 3f64.sqrt();
    TriMesh::new(
        vec![[s, s, s], [s, -s, -s], [-s, s, -s], [-s, -s, s]],
        vec![[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]],
    )
    .unwrap()
}
