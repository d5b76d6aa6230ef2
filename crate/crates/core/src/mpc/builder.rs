//! Circuit construction with constant folding. Words are little-endian bit
//! vectors (index 0 is the least significant bit).

use super::circuit::{BoolCircuit, Gate, GateOp};
use super::MpcError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Bit {
    Const(bool),
    Wire(u32),
}

impl Bit {
    pub const ZERO: Bit = Bit::Const(false);
    pub const ONE: Bit = Bit::Const(true);
}

pub struct CircuitBuilder {
    num_a: u32,
    num_b: u32,
    gates: Vec<Gate>,
}

impl CircuitBuilder {
    pub fn new(num_a: u32, num_b: u32) -> Self {
        CircuitBuilder {
            num_a,
            num_b,
            gates: Vec::new(),
        }
    }

    pub fn input_a(&self, i: u32) -> Bit {
        assert!(i < self.num_a);
        Bit::Wire(i)
    }

    pub fn input_b(&self, i: u32) -> Bit {
        assert!(i < self.num_b);
        Bit::Wire(self.num_a + i)
    }

    pub fn inputs_a(&self, start: u32, len: u32) -> Vec<Bit> {
        (start..start + len).map(|i| self.input_a(i)).collect()
    }

    pub fn inputs_b(&self, start: u32, len: u32) -> Vec<Bit> {
        (start..start + len).map(|i| self.input_b(i)).collect()
    }

    pub fn num_and(&self) -> usize {
        self.gates.iter().filter(|g| g.op == GateOp::And).count()
    }

    fn emit(&mut self, op: GateOp, a: u32, b: u32) -> Bit {
        let out = self.num_a + self.num_b + self.gates.len() as u32;
        self.gates.push(Gate { op, a, b, out });
        Bit::Wire(out)
    }

    pub fn xor(&mut self, x: Bit, y: Bit) -> Bit {
        match (x, y) {
            (Bit::Const(a), Bit::Const(b)) => Bit::Const(a ^ b),
            (Bit::Const(false), w) | (w, Bit::Const(false)) => w,
            (Bit::Const(true), w) | (w, Bit::Const(true)) => self.not(w),
            (Bit::Wire(a), Bit::Wire(b)) if a == b => Bit::ZERO,
            (Bit::Wire(a), Bit::Wire(b)) => self.emit(GateOp::Xor, a, b),
        }
    }

    pub fn and(&mut self, x: Bit, y: Bit) -> Bit {
        match (x, y) {
            (Bit::Const(a), Bit::Const(b)) => Bit::Const(a & b),
            (Bit::Const(false), _) | (_, Bit::Const(false)) => Bit::ZERO,
            (Bit::Const(true), w) | (w, Bit::Const(true)) => w,
            (Bit::Wire(a), Bit::Wire(b)) if a == b => x,
            (Bit::Wire(a), Bit::Wire(b)) => self.emit(GateOp::And, a, b),
        }
    }

    pub fn not(&mut self, x: Bit) -> Bit {
        match x {
            Bit::Const(a) => Bit::Const(!a),
            Bit::Wire(a) => self.emit(GateOp::Not, a, 0),
        }
    }

    pub fn or(&mut self, x: Bit, y: Bit) -> Bit {
        let nx = self.not(x);
        let ny = self.not(y);
        let t = self.and(nx, ny);
        self.not(t)
    }

    /// `if s { t } else { f }` with one AND.
    pub fn mux(&mut self, s: Bit, t: Bit, f: Bit) -> Bit {
        let d = self.xor(t, f);
        let m = self.and(s, d);
        self.xor(f, m)
    }

    pub fn const_word(v: u64, bits: usize) -> Vec<Bit> {
        (0..bits).map(|i| Bit::Const((v >> i) & 1 == 1)).collect()
    }

    pub fn xor_word(&mut self, x: &[Bit], y: &[Bit]) -> Vec<Bit> {
        assert_eq!(x.len(), y.len());
        x.iter().zip(y).map(|(a, b)| self.xor(*a, *b)).collect()
    }

    pub fn and_word(&mut self, s: Bit, x: &[Bit]) -> Vec<Bit> {
        x.iter().map(|a| self.and(s, *a)).collect()
    }

    pub fn mux_word(&mut self, s: Bit, t: &[Bit], f: &[Bit]) -> Vec<Bit> {
        assert_eq!(t.len(), f.len());
        t.iter().zip(f).map(|(a, b)| self.mux(s, *a, *b)).collect()
    }

    pub fn and_many(&mut self, xs: &[Bit]) -> Bit {
        match xs.len() {
            0 => Bit::ONE,
            1 => xs[0],
            n => {
                let l = self.and_many(&xs[..n / 2]);
                let r = self.and_many(&xs[n / 2..]);
                self.and(l, r)
            }
        }
    }

    pub fn or_many(&mut self, xs: &[Bit]) -> Bit {
        let n: Vec<Bit> = xs.iter().map(|x| self.not(*x)).collect();
        let a = self.and_many(&n);
        self.not(a)
    }

    pub fn eq_word(&mut self, x: &[Bit], y: &[Bit]) -> Bit {
        let d = self.xor_word(x, y);
        let nd: Vec<Bit> = d.iter().map(|b| self.not(*b)).collect();
        self.and_many(&nd)
    }

    pub fn eq_const(&mut self, x: &[Bit], v: u64) -> Bit {
        let c = Self::const_word(v, x.len());
        self.eq_word(x, &c)
    }

    /// Unsigned `x < y`, one AND per bit.
    pub fn lt(&mut self, x: &[Bit], y: &[Bit]) -> Bit {
        assert_eq!(x.len(), y.len());
        let mut borrow = Bit::ZERO;
        for (a, b) in x.iter().zip(y) {
            let d = self.xor(*a, *b);
            let e = self.xor(*b, borrow);
            let m = self.and(d, e);
            borrow = self.xor(borrow, m);
        }
        borrow
    }

    /// One-hot decoding of an unsigned word into `n` selector bits.
    pub fn decode(&mut self, x: &[Bit], n: usize) -> Vec<Bit> {
        let mut sel = vec![Bit::ONE];
        for b in x.iter().rev() {
            let nb = self.not(*b);
            let mut next = Vec::with_capacity(sel.len() * 2);
            for s in &sel {
                next.push(self.and(*s, nb));
                next.push(self.and(*s, *b));
            }
            sel = next;
        }
        sel.truncate(n);
        sel.resize(n, Bit::ZERO);
        sel
    }

    /// Finish the circuit; each output is copied into a fresh trailing wire.
    pub fn finish(mut self, outputs: &[Bit]) -> Result<BoolCircuit, MpcError> {
        if self.num_a + self.num_b == 0 && !outputs.is_empty() {
            return Err(MpcError::MalformedCircuit(
                "circuit with outputs needs at least one input".into(),
            ));
        }
        let base = self.num_a + self.num_b;
        // z = x AND NOT x is always 0 but carries a fresh garbled label, so
        // every output copy (constants included) gets an unpredictable colour bit.
        let z = if outputs.is_empty() {
            0
        } else {
            let n = base + self.gates.len() as u32;
            self.gates.push(Gate { op: GateOp::Not, a: 0, b: 0, out: n });
            self.gates.push(Gate { op: GateOp::And, a: 0, b: n, out: n + 1 });
            n + 1
        };
        for o in outputs {
            let out = base + self.gates.len() as u32;
            let g = match *o {
                Bit::Wire(w) => Gate { op: GateOp::Xor, a: w, b: z, out },
                Bit::Const(false) => Gate { op: GateOp::Xor, a: z, b: z, out },
                Bit::Const(true) => Gate { op: GateOp::Not, a: z, b: 0, out },
            };
            self.gates.push(g);
        }
        BoolCircuit::new(self.num_a, self.num_b, outputs.len() as u32, self.gates)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bits(v: u64, n: usize) -> Vec<bool> {
        (0..n).map(|i| (v >> i) & 1 == 1).collect()
    }

    #[test]
    fn folding() {
        let mut b = CircuitBuilder::new(1, 0);
        let x = b.input_a(0);
        assert_eq!(b.xor(x, Bit::ZERO), x);
        assert_eq!(b.and(x, Bit::ZERO), Bit::ZERO);
        assert_eq!(b.xor(x, x), Bit::ZERO);
        assert_eq!(b.num_and(), 0);
    }

    #[test]
    fn lt_exhaustive_4bit() {
        let mut b = CircuitBuilder::new(4, 4);
        let (x, y) = (b.inputs_a(0, 4), b.inputs_b(0, 4));
        let o = b.lt(&x, &y);
        let c = b.finish(&[o]).unwrap();
        for u in 0..16 {
            for v in 0..16 {
                assert_eq!(c.eval(&bits(u, 4), &bits(v, 4)).unwrap(), vec![u < v]);
            }
        }
    }

    #[test]
    fn decoder_is_one_hot() {
        let mut b = CircuitBuilder::new(3, 0);
        let x = b.inputs_a(0, 3);
        let sel = b.decode(&x, 6);
        let c = b.finish(&sel).unwrap();
        for v in 0..8u64 {
            let out = c.eval(&bits(v, 3), &[]).unwrap();
            for (i, s) in out.iter().enumerate() {
                assert_eq!(*s, i as u64 == v);
            }
        }
    }
}
