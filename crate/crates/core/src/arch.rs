//! Architecture strings.
//!
//! Grammar (whitespace is not allowed):
//!
//! ```text
//! arch     := encoder ( '-' item )* '-' decoder
//! encoder  := '(' conv ( '+' conv )* ')(encoding)'
//! decoder  := '(' n 'FC-AP' p ')(decoding)'
//! item     := conv | 'MP2' | n 'FC' | '(' item ( '-' item )* ')*' n
//! conv     := n 'C3'
//! ```
//!
//! Every convolution and fully connected layer is followed by a spiking
//! layer; the encoder's branches are summed, normalised once and feed one
//! spiking layer.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Block {
    Conv(usize),
    MaxPool,
    Fc(usize),
    Repeat(Vec<Block>, usize),
}

/// A flattened body layer after expanding repetition groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layer {
    Conv(usize),
    MaxPool,
    Fc(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    /// Output channels of each parallel encoder branch (all equal).
    pub encoder: Vec<usize>,
    pub body: Vec<Block>,
    /// Width of the decoder's fully connected layer (`P·C`).
    pub decoder_width: usize,
    /// Population size `P` of the average-pooling vote.
    pub population: usize,
}

impl NetworkSpec {
    pub fn encoder_channels(&self) -> usize {
        self.encoder[0]
    }

    pub fn classes(&self) -> usize {
        self.decoder_width / self.population
    }

    pub fn layers(&self) -> Vec<Layer> {
        fn expand(blocks: &[Block], out: &mut Vec<Layer>) {
            for b in blocks {
                match b {
                    Block::Conv(c) => out.push(Layer::Conv(*c)),
                    Block::MaxPool => out.push(Layer::MaxPool),
                    Block::Fc(g) => out.push(Layer::Fc(*g)),
                    Block::Repeat(inner, n) => {
                        for _ in 0..*n {
                            expand(inner, out);
                        }
                    }
                }
            }
        }
        let mut out = Vec::new();
        expand(&self.body, &mut out);
        out
    }

    /// Number of spiking layers: encoder, each body conv/FC, decoder.
    pub fn spiking_layers(&self) -> usize {
        2 + self.layers().iter().filter(|l| !matches!(l, Layer::MaxPool)).count()
    }

    pub fn render(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for NetworkSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn blocks(bs: &[Block]) -> String {
            bs.iter().map(block).collect::<Vec<_>>().join("-")
        }
        fn block(b: &Block) -> String {
            match b {
                Block::Conv(c) => format!("{c}C3"),
                Block::MaxPool => "MP2".into(),
                Block::Fc(g) => format!("{g}FC"),
                Block::Repeat(inner, n) => format!("({})*{n}", blocks(inner)),
            }
        }
        let enc: Vec<String> = self.encoder.iter().map(|c| format!("{c}C3")).collect();
        write!(f, "({})(encoding)", enc.join("+"))?;
        if !self.body.is_empty() {
            write!(f, "-{}", blocks(&self.body))?;
        }
        write!(f, "-({}FC-AP{})(decoding)", self.decoder_width, self.population)
    }
}

impl std::str::FromStr for NetworkSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        parse_arch(s)
    }
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn err<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(Error::Parse {
            pos: self.pos,
            msg: msg.into(),
        })
    }

    fn peek(&self) -> Option<u8> {
        self.src.get(self.pos).copied()
    }

    fn rest(&self) -> &'a [u8] {
        &self.src[self.pos..]
    }

    fn eat(&mut self, lit: &str) -> bool {
        if self.rest().starts_with(lit.as_bytes()) {
            self.pos += lit.len();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, lit: &str) -> Result<()> {
        if self.eat(lit) {
            Ok(())
        } else {
            self.err(format!("expected '{lit}'"))
        }
    }

    fn number(&mut self) -> Result<usize> {
        let start = self.pos;
        while self.peek().is_some_and(|c| c.is_ascii_digit()) {
            self.pos += 1;
        }
        if start == self.pos {
            return self.err("expected a number");
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii digits");
        let n: usize = text.parse().map_err(|_| Error::Parse {
            pos: start,
            msg: format!("number {text} out of range"),
        })?;
        if n == 0 {
            self.pos = start;
            return self.err("size must be positive");
        }
        Ok(n)
    }

    fn conv(&mut self) -> Result<usize> {
        let n = self.number()?;
        self.expect("C3")?;
        Ok(n)
    }

    fn encoder(&mut self) -> Result<Vec<usize>> {
        if !self.rest().starts_with(b"(") || !self.src.windows(10).any(|w| w == b"(encoding)") {
            return self.err("missing encoder: expected '(nC3+...)(encoding)'");
        }
        self.expect("(")?;
        let mut branches = vec![self.conv()?];
        while self.eat("+") {
            let at = self.pos;
            let c = self.conv()?;
            if c != branches[0] {
                self.pos = at;
                return self.err(format!("encoder branches must share width {}, got {c}", branches[0]));
            }
            branches.push(c);
        }
        self.expect(")(encoding)")?;
        Ok(branches)
    }

    /// A body item or the decoder. Returns `Ok(None)` after consuming the decoder.
    fn item(&mut self, depth: usize) -> Result<Option<Block>> {
        if self.peek() == Some(b'(') {
            let open = self.pos;
            self.pos += 1;
            if depth == 0 && self.looks_like_decoder() {
                return Ok(None);
            }
            let mut inner = Vec::new();
            loop {
                match self.item(depth + 1)? {
                    Some(b) => inner.push(b),
                    None => unreachable!("decoder only at depth 0"),
                }
                if !self.eat("-") {
                    break;
                }
            }
            if !self.eat(")*") {
                return self.err(format!("malformed repetition opened at {open}: expected ')*n'"));
            }
            let n = self.number()?;
            return Ok(Some(Block::Repeat(inner, n)));
        }
        if self.eat("MP2") {
            return Ok(Some(Block::MaxPool));
        }
        if self.peek().is_some_and(|c| c.is_ascii_digit()) {
            let n = self.number()?;
            if self.eat("C3") {
                return Ok(Some(Block::Conv(n)));
            }
            if self.eat("FC") {
                return Ok(Some(Block::Fc(n)));
            }
            return self.err("unknown layer token (expected C3 or FC)");
        }
        if self.peek().is_none() {
            return self.err("missing decoder: expected '(nFC-APp)(decoding)'");
        }
        self.err("unknown token")
    }

    /// Called just after a top-level '('; parses the decoder if that is what follows.
    fn looks_like_decoder(&mut self) -> bool {
        let save = self.pos;
        let ok = (|| -> Result<()> {
            self.number()?;
            self.expect("FC-AP")?;
            self.number()?;
            self.expect(")(decoding)")
        })();
        self.pos = save;
        ok.is_ok()
    }

    fn decoder(&mut self) -> Result<(usize, usize)> {
        let width = self.number()?;
        self.expect("FC-AP")?;
        let at = self.pos;
        let pop = self.number()?;
        self.expect(")(decoding)")?;
        if width % pop != 0 {
            self.pos = at;
            return self.err(format!("decoder width {width} is not a multiple of population {pop}"));
        }
        Ok((width, pop))
    }
}

pub fn parse_arch(s: &str) -> Result<NetworkSpec> {
    let mut p = Parser { src: s.as_bytes(), pos: 0 };
    let encoder = p.encoder()?;
    let mut body = Vec::new();
    loop {
        if p.peek().is_none() {
            return p.err("missing decoder: expected '(nFC-APp)(decoding)'");
        }
        p.expect("-")?;
        match p.item(0)? {
            Some(b) => body.push(b),
            None => break,
        }
    }
    let (decoder_width, population) = p.decoder()?;
    if p.peek().is_some() {
        return p.err("trailing input after decoder");
    }
    let spec = NetworkSpec {
        encoder,
        body,
        decoder_width,
        population,
    };
    let mut seen_fc = false;
    for l in spec.layers() {
        match l {
            Layer::Fc(_) => seen_fc = true,
            Layer::Conv(_) | Layer::MaxPool if seen_fc => {
                return Err(Error::Parse {
                    pos: 0,
                    msg: "convolution or pooling after a fully connected layer".into(),
                })
            }
            _ => {}
        }
    }
    Ok(spec)
}
