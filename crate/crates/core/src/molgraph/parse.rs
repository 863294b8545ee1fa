use super::{AtomRecord, BondOrder, Element, MolGraph, SmilesError};

/// Non-fatal notes about input the parser accepted but did not model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseWarning {
    pub offset: usize,
    pub message: String,
}

/// Parse SMILES text, logging any warnings.
pub fn parse_smiles(text: &str) -> Result<MolGraph, SmilesError> {
    let (graph, warnings) = parse_smiles_with_warnings(text)?;
    for w in &warnings {
        log::warn!("{text}: offset {}: {}", w.offset, w.message);
    }
    Ok(graph)
}

pub fn parse_smiles_with_warnings(
    text: &str,
) -> Result<(MolGraph, Vec<ParseWarning>), SmilesError> {
    let mut parser = Parser {
        src: text.as_bytes(),
        pos: 0,
        graph: MolGraph::new(),
        bracket: Vec::new(),
        offsets: Vec::new(),
        warnings: Vec::new(),
    };
    parser.run()?;
    parser.finish()
}

#[derive(Clone, Copy)]
struct PendingBond {
    order: Option<BondOrder>,
    offset: usize,
}

struct RingOpen {
    atom: usize,
    bond: Option<BondOrder>,
    offset: usize,
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
    graph: MolGraph,
    bracket: Vec<bool>,
    offsets: Vec<usize>,
    warnings: Vec<ParseWarning>,
}

fn syntax(offset: usize, message: impl Into<String>) -> SmilesError {
    SmilesError::Syntax {
        offset,
        message: message.into(),
    }
}

impl Parser<'_> {
    fn peek(&self) -> Option<u8> {
        self.src.get(self.pos).copied()
    }

    fn warn(&mut self, offset: usize, message: impl Into<String>) {
        self.warnings.push(ParseWarning {
            offset,
            message: message.into(),
        });
    }

    fn run(&mut self) -> Result<(), SmilesError> {
        let mut prev: Option<usize> = None;
        let mut branches: Vec<(Option<usize>, usize)> = Vec::new();
        let mut pending: Option<PendingBond> = None;
        let mut rings: Vec<Option<RingOpen>> = (0..100).map(|_| None).collect();
        let mut expect_atom_after_dot = false;

        while let Some(c) = self.peek() {
            let start = self.pos;
            match c {
                b'(' => {
                    if prev.is_none() {
                        return Err(syntax(start, "branch without preceding atom"));
                    }
                    if pending.is_some() {
                        return Err(syntax(start, "bond symbol before branch"));
                    }
                    branches.push((prev, start));
                    self.pos += 1;
                }
                b')' => {
                    let Some((atom, _)) = branches.pop() else {
                        return Err(syntax(start, "unmatched ')'"));
                    };
                    if let Some(p) = pending {
                        return Err(syntax(p.offset, "dangling bond before ')'"));
                    }
                    prev = atom;
                    self.pos += 1;
                }
                b'-' | b'=' | b'#' | b':' | b'/' | b'\\' => {
                    if pending.is_some() {
                        return Err(syntax(start, "two consecutive bond symbols"));
                    }
                    if prev.is_none() {
                        return Err(syntax(start, "bond without preceding atom"));
                    }
                    let order = match c {
                        b'=' => BondOrder::Double,
                        b'#' => BondOrder::Triple,
                        b':' => BondOrder::Aromatic,
                        b'/' | b'\\' => {
                            self.warn(start, "directional bond ignored; read as single");
                            BondOrder::Single
                        }
                        _ => BondOrder::Single,
                    };
                    pending = Some(PendingBond {
                        order: Some(order),
                        offset: start,
                    });
                    self.pos += 1;
                }
                b'$' => return Err(syntax(start, "quadruple bonds are not supported")),
                b'.' => {
                    if let Some(p) = pending {
                        return Err(syntax(p.offset, "bond symbol before '.'"));
                    }
                    if prev.is_none() {
                        return Err(syntax(start, "'.' without preceding atom"));
                    }
                    prev = None;
                    expect_atom_after_dot = true;
                    self.pos += 1;
                }
                b'0'..=b'9' | b'%' => {
                    let Some(atom) = prev else {
                        return Err(syntax(start, "ring closure without preceding atom"));
                    };
                    let digit = if c == b'%' {
                        let d = self
                            .src
                            .get(self.pos + 1..self.pos + 3)
                            .filter(|d| d.iter().all(u8::is_ascii_digit))
                            .ok_or_else(|| syntax(start, "'%' must be followed by two digits"))?;
                        self.pos += 3;
                        ((d[0] - b'0') * 10 + (d[1] - b'0')) as usize
                    } else {
                        self.pos += 1;
                        (c - b'0') as usize
                    };
                    let bond = pending.take().and_then(|p| p.order);
                    match rings[digit].take() {
                        None => {
                            rings[digit] = Some(RingOpen {
                                atom,
                                bond,
                                offset: start,
                            })
                        }
                        Some(open) => {
                            let order = match (open.bond, bond) {
                                (Some(a), Some(b)) if a != b => {
                                    return Err(syntax(start, "conflicting ring-closure bonds"))
                                }
                                (Some(a), _) | (None, Some(a)) => a,
                                (None, None) => self.implicit_order(open.atom, atom),
                            };
                            if self.graph.add_bond(open.atom, atom, order).is_none() {
                                return Err(syntax(start, "ring closure duplicates a bond"));
                            }
                        }
                    }
                }
                b'[' | b'*' | b'A'..=b'Z' | b'a'..=b'z' => {
                    let atom = self.read_atom()?;
                    expect_atom_after_dot = false;
                    if let Some(p) = prev {
                        let order = match pending.take().and_then(|p| p.order) {
                            Some(o) => o,
                            None => self.implicit_order(p, atom),
                        };
                        self.graph.add_bond(p, atom, order);
                    } else if let Some(p) = pending {
                        return Err(syntax(p.offset, "bond without preceding atom"));
                    }
                    prev = Some(atom);
                }
                b' ' | b'\t' | b'\n' | b'\r' => {
                    return Err(syntax(start, "whitespace inside SMILES"));
                }
                _ => return Err(syntax(start, format!("unknown token '{}'", c as char))),
            }
        }
        if let Some(p) = pending {
            return Err(syntax(p.offset, "dangling bond at end of input"));
        }
        if let Some((_, offset)) = branches.first() {
            return Err(syntax(*offset, "unclosed branch"));
        }
        if let Some(open) = rings.iter().flatten().min_by_key(|r| r.offset) {
            return Err(syntax(open.offset, "unclosed ring"));
        }
        if expect_atom_after_dot {
            return Err(syntax(self.src.len(), "trailing '.'"));
        }
        Ok(())
    }

    fn implicit_order(&self, a: usize, b: usize) -> BondOrder {
        if self.graph.atom(a).aromatic && self.graph.atom(b).aromatic {
            BondOrder::Aromatic
        } else {
            BondOrder::Single
        }
    }

    fn push_atom(&mut self, atom: AtomRecord, offset: usize, bracket: bool) -> usize {
        self.bracket.push(bracket);
        self.offsets.push(offset);
        self.graph.add_atom(atom)
    }

    fn read_atom(&mut self) -> Result<usize, SmilesError> {
        let start = self.pos;
        let c = self.src[self.pos];
        if c == b'[' {
            return self.read_bracket_atom();
        }
        if c == b'*' {
            self.pos += 1;
            return Ok(self.push_atom(AtomRecord::wildcard(), start, false));
        }
        let two = self.src.get(self.pos..self.pos + 2);
        let (element, aromatic, len) = match two {
            Some(b"Cl") => (Element::CL, false, 2),
            Some(b"Br") => (Element::BR, false, 2),
            _ => match c {
                b'B' => (Element::B, false, 1),
                b'C' => (Element::C, false, 1),
                b'N' => (Element::N, false, 1),
                b'O' => (Element::O, false, 1),
                b'P' => (Element::P, false, 1),
                b'S' => (Element::S, false, 1),
                b'F' => (Element::F, false, 1),
                b'I' => (Element::I, false, 1),
                b'b' => (Element::B, true, 1),
                b'c' => (Element::C, true, 1),
                b'n' => (Element::N, true, 1),
                b'o' => (Element::O, true, 1),
                b'p' => (Element::P, true, 1),
                b's' => (Element::S, true, 1),
                _ => {
                    return Err(syntax(
                        start,
                        format!("'{}' is not an organic-subset atom", c as char),
                    ))
                }
            },
        };
        self.pos += len;
        let mut atom = AtomRecord::new(element);
        atom.aromatic = aromatic;
        Ok(self.push_atom(atom, start, false))
    }

    fn read_number(&mut self) -> Option<u32> {
        let start = self.pos;
        while self.peek().is_some_and(|c| c.is_ascii_digit()) {
            self.pos += 1;
        }
        if start == self.pos {
            return None;
        }
        std::str::from_utf8(&self.src[start..self.pos])
            .ok()?
            .parse()
            .ok()
    }

    fn read_bracket_atom(&mut self) -> Result<usize, SmilesError> {
        let start = self.pos;
        self.pos += 1;
        let isotope = self.read_number();
        let isotope = match isotope {
            Some(i) if i > u16::MAX as u32 => return Err(syntax(start, "isotope out of range")),
            other => other.map(|i| i as u16),
        };

        let sym_start = self.pos;
        let (element, aromatic) = match self.peek() {
            Some(b'*') => {
                self.pos += 1;
                (Element::WILDCARD, false)
            }
            Some(c) if c.is_ascii_lowercase() => {
                let two = self.src.get(self.pos..self.pos + 2);
                let (sym, len) = match two {
                    Some(b"se") => ("Se", 2),
                    Some(b"as") => ("As", 2),
                    Some(b"te") => ("Te", 2),
                    _ => match c {
                        b'b' => ("B", 1),
                        b'c' => ("C", 1),
                        b'n' => ("N", 1),
                        b'o' => ("O", 1),
                        b'p' => ("P", 1),
                        b's' => ("S", 1),
                        _ => return Err(syntax(sym_start, "unknown aromatic symbol")),
                    },
                };
                self.pos += len;
                (Element::from_symbol(sym).expect("table symbol"), true)
            }
            Some(c) if c.is_ascii_uppercase() => {
                let next = self.src.get(self.pos + 1).copied();
                let two = next
                    .filter(u8::is_ascii_lowercase)
                    .and_then(|n| {
                        let s = [c, n];
                        Element::from_symbol(std::str::from_utf8(&s).ok()?)
                    });
                match two {
                    Some(e) => {
                        self.pos += 2;
                        (e, false)
                    }
                    None => {
                        let s = [c];
                        let e = Element::from_symbol(std::str::from_utf8(&s).unwrap_or(""))
                            .ok_or_else(|| syntax(sym_start, "unknown element symbol"))?;
                        self.pos += 1;
                        (e, false)
                    }
                }
            }
            _ => return Err(syntax(sym_start, "missing element symbol in bracket atom")),
        };

        if self.peek() == Some(b'@') {
            let chir = self.pos;
            while self.peek() == Some(b'@') {
                self.pos += 1;
            }
            let class = self.src.get(self.pos..self.pos + 2);
            if matches!(class, Some(b"TH" | b"AL" | b"SP" | b"TB" | b"OH")) {
                self.pos += 2;
                self.read_number();
            }
            self.warn(chir, "chirality ignored");
        }

        let mut hydrogens = 0u8;
        if self.peek() == Some(b'H') {
            self.pos += 1;
            hydrogens = match self.read_number() {
                Some(n) if n <= 9 => n as u8,
                Some(_) => return Err(syntax(self.pos, "hydrogen count out of range")),
                None => 1,
            };
        }

        let mut charge: i32 = 0;
        if let Some(sign @ (b'+' | b'-')) = self.peek() {
            let unit = if sign == b'+' { 1 } else { -1 };
            self.pos += 1;
            if let Some(n) = self.read_number() {
                charge = unit * n as i32;
            } else {
                charge = unit;
                while self.peek() == Some(sign) {
                    charge += unit;
                    self.pos += 1;
                }
            }
            if charge.abs() > 15 {
                return Err(syntax(start, "charge out of range"));
            }
        }

        let mut atom_map = None;
        if self.peek() == Some(b':') {
            self.pos += 1;
            atom_map = Some(
                self.read_number()
                    .ok_or_else(|| syntax(self.pos, "atom map must be a number"))?,
            );
        }

        if self.peek() != Some(b']') {
            return Err(syntax(self.pos, "expected ']'"));
        }
        self.pos += 1;

        let mut atom = AtomRecord::new(element);
        atom.aromatic = aromatic;
        atom.explicit_h = hydrogens;
        atom.formal_charge = charge as i8;
        atom.isotope = isotope;
        atom.atom_map = atom_map.filter(|m| *m > 0);
        Ok(self.push_atom(atom, start, true))
    }

    fn finish(mut self) -> Result<(MolGraph, Vec<ParseWarning>), SmilesError> {
        let mut seen_maps = std::collections::HashSet::new();
        for v in 0..self.graph.len() {
            if let Some(m) = self.graph.atom(v).atom_map {
                if !seen_maps.insert(m) {
                    return Err(syntax(self.offsets[v], format!("duplicate atom map {m}")));
                }
            }
        }
        for v in 0..self.graph.len() {
            if !self.bracket[v] {
                let h = self.graph.default_implicit_h(v).ok_or_else(|| SmilesError::Valence {
                    offset: self.offsets[v],
                    message: format!("no allowed valence fits {}", self.graph.atom(v).element),
                })?;
                self.graph.atom_mut(v).implicit_h = h;
            }
            if !self.graph.valence_state(v).legal {
                return Err(SmilesError::Valence {
                    offset: self.offsets[v],
                    message: format!("illegal valence on {}", self.graph.atom(v).element),
                });
            }
        }
        Ok((self.graph, self.warnings))
    }
}
