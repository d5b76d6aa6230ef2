use std::fmt::Write as _;

use super::MpcError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GateOp {
    And,
    Xor,
    Not,
}

impl GateOp {
    fn name(self) -> &'static str {
        match self {
            GateOp::And => "AND",
            GateOp::Xor => "XOR",
            GateOp::Not => "NOT",
        }
    }
}

/// `b` is ignored for NOT gates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Gate {
    pub op: GateOp,
    pub a: u32,
    pub b: u32,
    pub out: u32,
}

/// Boolean circuit over AND/XOR/NOT.
///
/// Wires `0..num_inputs_a` belong to the garbler, the next `num_inputs_b` to
/// the evaluator; every gate writes one fresh wire and the outputs are the
/// last `num_outputs` wires.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BoolCircuit {
    pub num_inputs_a: u32,
    pub num_inputs_b: u32,
    pub num_outputs: u32,
    pub gates: Vec<Gate>,
    num_and: usize,
}

impl BoolCircuit {
    pub fn new(
        num_inputs_a: u32,
        num_inputs_b: u32,
        num_outputs: u32,
        gates: Vec<Gate>,
    ) -> Result<Self, MpcError> {
        let c = BoolCircuit {
            num_inputs_a,
            num_inputs_b,
            num_outputs,
            num_and: gates.iter().filter(|g| g.op == GateOp::And).count(),
            gates,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn num_inputs(&self) -> usize {
        (self.num_inputs_a + self.num_inputs_b) as usize
    }

    pub fn num_wires(&self) -> usize {
        self.num_inputs() + self.gates.len()
    }

    pub fn num_and(&self) -> usize {
        self.num_and
    }

    pub fn output_wires(&self) -> std::ops::Range<usize> {
        self.num_wires() - self.num_outputs as usize..self.num_wires()
    }

    fn validate(&self) -> Result<(), MpcError> {
        let bad = |m: String| Err(MpcError::MalformedCircuit(m));
        let n = self.num_wires();
        if self.num_outputs as usize > n {
            return bad(format!("{} outputs but only {n} wires", self.num_outputs));
        }
        let mut written = vec![false; n];
        written[..self.num_inputs()].iter_mut().for_each(|w| *w = true);
        for (i, g) in self.gates.iter().enumerate() {
            let ins: &[u32] = if g.op == GateOp::Not { &[g.a] } else { &[g.a, g.b] };
            for &w in ins {
                if w as usize >= n {
                    return bad(format!("gate {i} reads nonexistent wire {w}"));
                }
                if !written[w as usize] {
                    return bad(format!("gate {i} reads wire {w} before it is written"));
                }
            }
            let o = g.out as usize;
            if o >= n || o < self.num_inputs() {
                return bad(format!("gate {i} writes out-of-range wire {o}"));
            }
            if written[o] {
                return bad(format!("wire {o} written twice"));
            }
            written[o] = true;
        }
        Ok(())
    }

    /// Plaintext evaluation.
    pub fn eval(&self, a: &[bool], b: &[bool]) -> Result<Vec<bool>, MpcError> {
        if a.len() != self.num_inputs_a as usize || b.len() != self.num_inputs_b as usize {
            return Err(MpcError::InputCount {
                expected: self.num_inputs(),
                got: a.len() + b.len(),
            });
        }
        let mut w = vec![false; self.num_wires()];
        w[..a.len()].copy_from_slice(a);
        w[a.len()..a.len() + b.len()].copy_from_slice(b);
        for g in &self.gates {
            w[g.out as usize] = match g.op {
                GateOp::And => w[g.a as usize] & w[g.b as usize],
                GateOp::Xor => w[g.a as usize] ^ w[g.b as usize],
                GateOp::Not => !w[g.a as usize],
            };
        }
        Ok(w[self.output_wires()].to_vec())
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "INPUTS_A {} INPUTS_B {} OUTPUTS {}\n",
            self.num_inputs_a, self.num_inputs_b, self.num_outputs
        );
        for g in &self.gates {
            match g.op {
                GateOp::Not => writeln!(s, "GATE NOT {} {}", g.a, g.out),
                op => writeln!(s, "GATE {} {} {} {}", op.name(), g.a, g.b, g.out),
            }
            .unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, MpcError> {
        let perr = |line: usize, reason: &str| MpcError::CircuitParse {
            line,
            reason: reason.to_string(),
        };
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        let (hl, header) = lines.next().ok_or_else(|| perr(1, "missing header"))?;
        let h: Vec<&str> = header.split_whitespace().collect();
        if h.len() != 6 || h[0] != "INPUTS_A" || h[2] != "INPUTS_B" || h[4] != "OUTPUTS" {
            return Err(perr(hl, "expected `INPUTS_A n INPUTS_B m OUTPUTS k`"));
        }
        let num = |s: &str| s.parse::<u32>().map_err(|_| perr(hl, "bad header count"));
        let (na, nb, no) = (num(h[1])?, num(h[3])?, num(h[5])?);
        let mut gates = Vec::new();
        for (ln, line) in lines {
            let t: Vec<&str> = line.split_whitespace().collect();
            if t.first() != Some(&"GATE") {
                return Err(perr(ln, "expected GATE"));
            }
            let w = |s: &str| s.parse::<u32>().map_err(|_| perr(ln, "bad wire id"));
            let g = match (t.get(1).copied(), t.len()) {
                (Some("NOT"), 4) => Gate {
                    op: GateOp::Not,
                    a: w(t[2])?,
                    b: 0,
                    out: w(t[3])?,
                },
                (Some(op @ ("AND" | "XOR")), 5) => Gate {
                    op: if op == "AND" { GateOp::And } else { GateOp::Xor },
                    a: w(t[2])?,
                    b: w(t[3])?,
                    out: w(t[4])?,
                },
                _ => return Err(perr(ln, "unknown gate or wrong operand count")),
            };
            gates.push(g);
        }
        BoolCircuit::new(na, nb, no, gates)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_use_before_write() {
        let g = vec![
            Gate { op: GateOp::And, a: 0, b: 3, out: 2 },
            Gate { op: GateOp::Xor, a: 0, b: 1, out: 3 },
        ];
        assert!(matches!(BoolCircuit::new(1, 1, 1, g), Err(MpcError::MalformedCircuit(_))));
    }

    #[test]
    fn rejects_double_write() {
        let g = vec![
            Gate { op: GateOp::And, a: 0, b: 1, out: 2 },
            Gate { op: GateOp::Xor, a: 0, b: 1, out: 2 },
        ];
        assert!(BoolCircuit::new(1, 1, 1, g).is_err());
    }

    #[test]
    fn text_roundtrip() {
        let text = "INPUTS_A 1 INPUTS_B 1 OUTPUTS 1\nGATE AND 0 1 2\nGATE NOT 2 3\n";
        let c = BoolCircuit::from_text(text).unwrap();
        assert_eq!(c.to_text(), text);
        assert_eq!(c.eval(&[true], &[true]).unwrap(), vec![false]);
        assert!(BoolCircuit::from_text("INPUTS_A 1 INPUTS_B 1 OUTPUTS 1\nGATE OR 0 1 2\n").is_err());
    }
}
