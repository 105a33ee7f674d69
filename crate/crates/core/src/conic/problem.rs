use std::fmt::Write as _;

use super::ConicError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    Free,
    Psd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Block {
    pub kind: BlockKind,
    pub size: usize,
}

/// One nonzero of the equality matrix.
///
/// For a free block `j` is always 0 and `i` indexes the scalar. For a PSD
/// block only `i <= j` is addressed and the entry contributes
/// `value * X[i][j]` to the row, with `X[j][i] = X[i][j]` implied.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Entry {
    pub row: usize,
    pub block: usize,
    pub i: usize,
    pub j: usize,
    pub value: f64,
}

/// One nonzero of the linear objective, same addressing as [`Entry`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveEntry {
    pub block: usize,
    pub i: usize,
    pub j: usize,
    pub value: f64,
}

/// `minimize <c, x>` subject to `A x = b`, `x` in a product of free and PSD blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct ConicProblem {
    pub blocks: Vec<Block>,
    pub entries: Vec<Entry>,
    pub rhs: Vec<f64>,
    pub objective: Vec<ObjectiveEntry>,
}

impl ConicProblem {
    pub fn nrows(&self) -> usize {
        self.rhs.len()
    }

    pub fn validate(&self) -> Result<(), ConicError> {
        let check = |block: usize, i: usize, j: usize| -> Result<(), ConicError> {
            let b = self
                .blocks
                .get(block)
                .ok_or_else(|| ConicError::Malformed(format!("block {block} out of range")))?;
            let ok = match b.kind {
                BlockKind::Free => j == 0 && i < b.size,
                BlockKind::Psd => i <= j && j < b.size,
            };
            if ok {
                Ok(())
            } else {
                Err(ConicError::Malformed(format!(
                    "entry ({i},{j}) invalid for block {block} ({:?}, size {})",
                    b.kind, b.size
                )))
            }
        };
        for e in &self.entries {
            if e.row >= self.rhs.len() {
                return Err(ConicError::Malformed(format!("row {} out of range", e.row)));
            }
            if !e.value.is_finite() {
                return Err(ConicError::Malformed(format!("non-finite entry in row {}", e.row)));
            }
            check(e.block, e.i, e.j)?;
        }
        for o in &self.objective {
            check(o.block, o.i, o.j)?;
        }
        if self.rhs.iter().any(|v| !v.is_finite()) {
            return Err(ConicError::Malformed("non-finite right-hand side".into()));
        }
        Ok(())
    }

    pub fn has_objective(&self) -> bool {
        self.objective.iter().any(|o| o.value != 0.0)
    }

    /// Sparse text dump, one nonzero per line:
    ///
    /// ```text
    /// blocks <kind>:<size> ...
    /// rows <m>
    /// A <row> <block> <i> <j> <value>
    /// b <row> <value>
    /// c <block> <i> <j> <value>
    /// ```
    ///
    /// Values use shortest round-trip exponent notation, so identical problems
    /// dump to identical bytes.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        s.push_str("blocks");
        for b in &self.blocks {
            let k = match b.kind {
                BlockKind::Free => "free",
                BlockKind::Psd => "psd",
            };
            let _ = write!(s, " {k}:{}", b.size);
        }
        let _ = writeln!(s, "\nrows {}", self.rhs.len());
        for e in &self.entries {
            let _ = writeln!(s, "A {} {} {} {} {:e}", e.row, e.block, e.i, e.j, e.value);
        }
        for (r, v) in self.rhs.iter().enumerate() {
            if *v != 0.0 {
                let _ = writeln!(s, "b {r} {v:e}");
            }
        }
        for o in &self.objective {
            let _ = writeln!(s, "c {} {} {} {:e}", o.block, o.i, o.j, o.value);
        }
        s
    }
}
