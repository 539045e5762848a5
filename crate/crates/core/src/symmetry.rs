//! The 48-element octahedral symmetry group acting on lattice offsets.
//!
//! Elements are signed permutation matrices stored as (permutation, signs).
//! The truncated-octahedron cell and the BCC center lattice are both
//! invariant under every element, so coefficient classes can be reduced to
//! canonical orbit representatives.

/// One signed permutation: `y[r] = sign[r] * x[perm[r]]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OctElement {
    perm: [usize; 3],
    sign: [i64; 3],
}

impl OctElement {
    pub const IDENTITY: OctElement = OctElement {
        perm: [0, 1, 2],
        sign: [1, 1, 1],
    };

    #[inline]
    pub fn apply(&self, v: [i64; 3]) -> [i64; 3] {
        [
            self.sign[0] * v[self.perm[0]],
            self.sign[1] * v[self.perm[1]],
            self.sign[2] * v[self.perm[2]],
        ]
    }

    #[inline]
    pub fn apply_f64(&self, v: [f64; 3]) -> [f64; 3] {
        [
            self.sign[0] as f64 * v[self.perm[0]],
            self.sign[1] as f64 * v[self.perm[1]],
            self.sign[2] as f64 * v[self.perm[2]],
        ]
    }

    /// Inverse element (transpose of the signed permutation matrix).
    pub fn inverse(&self) -> OctElement {
        let mut perm = [0usize; 3];
        let mut sign = [0i64; 3];
        for r in 0..3 {
            perm[self.perm[r]] = r;
            sign[self.perm[r]] = self.sign[r];
        }
        OctElement { perm, sign }
    }
}

/// All 48 elements in a fixed deterministic order.
pub fn octahedral_group() -> Vec<OctElement> {
    const PERMS: [[usize; 3]; 6] = [
        [0, 1, 2],
        [0, 2, 1],
        [1, 0, 2],
        [1, 2, 0],
        [2, 0, 1],
        [2, 1, 0],
    ];
    let mut out = Vec::with_capacity(48);
    for perm in PERMS {
        for bits in 0..8u8 {
            let sign = [
                if bits & 1 == 0 { 1 } else { -1 },
                if bits & 2 == 0 { 1 } else { -1 },
                if bits & 4 == 0 { 1 } else { -1 },
            ];
            out.push(OctElement { perm, sign });
        }
    }
    out
}

/// Canonical representative of the orbit of `v`: the lexicographically
/// smallest image, together with the first group element reaching it.
pub fn canonicalize(group: &[OctElement], v: [i64; 3]) -> ([i64; 3], OctElement) {
    let mut best = group[0].apply(v);
    let mut best_g = group[0];
    for g in &group[1..] {
        let w = g.apply(v);
        if w < best {
            best = w;
            best_g = *g;
        }
    }
    (best, best_g)
}

/// All elements fixing `v`.
pub fn stabilizer(group: &[OctElement], v: [i64; 3]) -> Vec<OctElement> {
    group.iter().copied().filter(|g| g.apply(v) == v).collect()
}
