//! Template-generated programs rendered for both architectures.
//!
//! Each block is a list of abstract operations. Rendering hands out registers
//! in order of first use, like a simple allocator, and now and then draws a
//! random assignment instead. Equal IDs mean equal semantics. Constants stay
//! the same and a few operations expand to several instructions on one side
//! only.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Arch, BlockRecord, CfgRecord, FunctionRecord, OptLevel};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Cond {
    Eq,
    Ne,
    Lt,
    Gt,
    Le,
    Ge,
}

impl Cond {
    const ALL: [Cond; 6] = [Cond::Eq, Cond::Ne, Cond::Lt, Cond::Gt, Cond::Le, Cond::Ge];

    fn x86(self) -> &'static str {
        match self {
            Cond::Eq => "je",
            Cond::Ne => "jne",
            Cond::Lt => "jl",
            Cond::Gt => "jg",
            Cond::Le => "jle",
            Cond::Ge => "jge",
        }
    }

    fn arm(self) -> &'static str {
        match self {
            Cond::Eq => "beq",
            Cond::Ne => "bne",
            Cond::Lt => "blt",
            Cond::Gt => "bgt",
            Cond::Le => "ble",
            Cond::Ge => "bge",
        }
    }
}

/// Register operands are virtual indices into the block's register pool.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Op {
    Zero(usize),
    MovImm(usize, i64),
    MovReg(usize, usize),
    Load(usize, u32),
    Store(usize, u32),
    AddImm(usize, i64),
    AddReg(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Shift(usize, u8),
    AddMem(usize, u32),
    Call(usize, &'static str),
    LoadStr(usize, u32),
    CmpBranch(usize, i64, Cond, u32),
    Jump(u32),
}

impl Op {
    fn regs(&self) -> Vec<usize> {
        match *self {
            Op::MovReg(a, b) | Op::AddReg(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![a, b],
            Op::Zero(a)
            | Op::MovImm(a, _)
            | Op::Load(a, _)
            | Op::Store(a, _)
            | Op::AddImm(a, _)
            | Op::Shift(a, _)
            | Op::AddMem(a, _)
            | Op::Call(a, _)
            | Op::LoadStr(a, _)
            | Op::CmpBranch(a, ..) => vec![a],
            Op::Jump(_) => vec![],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AbsBlock {
    pub id: u64,
    pub ops: Vec<Op>,
}

const X86_32: [&str; 8] = ["eax", "ecx", "edx", "ebx", "esi", "edi", "r8d", "r9d"];
const X86_64: [&str; 8] = ["rax", "rcx", "rdx", "rbx", "rsi", "rdi", "r8", "r9"];
const ARM: [&str; 8] = ["r0", "r1", "r2", "r3", "r4", "r5", "r6", "r7"];
const CALLEES: [&str; 12] = [
    "memcpy", "strlen", "malloc", "free", "printf", "strcmp", "abort", "puts", "memset", "fopen", "read", "write",
];

fn render_x86(op: &Op, reg: &[usize], out: &mut Vec<String>) {
    let r = |v: usize| X86_32[reg[v]];
    let q = |v: usize| X86_64[reg[v]];
    match *op {
        Op::Zero(a) => out.push(format!("xorl %{}, %{}", r(a), r(a))),
        Op::MovImm(a, c) => out.push(format!("movl %{}, ${c}", r(a))),
        Op::MovReg(a, b) => out.push(format!("movl %{}, %{}", r(a), r(b))),
        Op::Load(a, off) => out.push(format!("movl %{}, -{off}(%rbp)", r(a))),
        Op::Store(a, off) => out.push(format!("movl -{off}(%rbp), %{}", r(a))),
        Op::AddImm(a, c) => out.push(format!("addl %{}, ${c}", r(a))),
        Op::AddReg(a, b) => out.push(format!("addl %{}, %{}", r(a), r(b))),
        Op::Sub(a, b) => out.push(format!("subl %{}, %{}", r(a), r(b))),
        Op::Mul(a, b) => out.push(format!("imull %{}, %{}", r(a), r(b))),
        Op::Shift(a, c) => out.push(format!("shll %{}, ${c}", r(a))),
        Op::AddMem(a, off) => out.push(format!("addl -{off}(%rbp), %{}", r(a))),
        Op::Call(a, f) => {
            out.push(format!("movl %edi, %{}", r(a)));
            out.push(format!("callq {f}"));
        }
        Op::LoadStr(a, k) => out.push(format!("leaq %{}, .L.str.{k}", q(a))),
        Op::CmpBranch(a, c, cond, l) => {
            out.push(format!("cmpl %{}, ${c}", r(a)));
            out.push(format!("{} .LBB0_{l}", cond.x86()));
        }
        Op::Jump(l) => out.push(format!("jmp .LBB0_{l}")),
    }
}

fn render_arm(op: &Op, reg: &[usize], out: &mut Vec<String>) {
    let r = |v: usize| ARM[reg[v]];
    match *op {
        Op::Zero(a) => out.push(format!("mov {}, #0", r(a))),
        Op::MovImm(a, c) => {
            if (0..256).contains(&c) {
                out.push(format!("mov {}, #{c}", r(a)));
            } else if (-256..0).contains(&c) {
                out.push(format!("mvn {}, #{}", r(a), -c - 1));
            } else {
                let u = c as u32;
                out.push(format!("movw {}, #{}", r(a), u & 0xffff));
                if u > 0xffff {
                    out.push(format!("movt {}, #{}", r(a), u >> 16));
                }
            }
        }
        Op::MovReg(a, b) => out.push(format!("mov {}, {}", r(a), r(b))),
        Op::Load(a, off) => out.push(format!("ldr {}, [fp, #-{off}]", r(a))),
        Op::Store(a, off) => out.push(format!("str {}, [fp, #-{off}]", r(a))),
        Op::AddImm(a, c) => out.push(format!("add {0}, {0}, #{c}", r(a))),
        Op::AddReg(a, b) => out.push(format!("add {0}, {0}, {1}", r(a), r(b))),
        Op::Sub(a, b) => out.push(format!("sub {0}, {0}, {1}", r(a), r(b))),
        Op::Mul(a, b) => out.push(format!("mul {0}, {0}, {1}", r(a), r(b))),
        Op::Shift(a, c) => out.push(format!("lsl {0}, {0}, #{c}", r(a))),
        Op::AddMem(a, off) => {
            out.push(format!("ldr r12, [fp, #-{off}]"));
            out.push(format!("add r12, r12, {}", r(a)));
            out.push(format!("str r12, [fp, #-{off}]"));
        }
        Op::Call(a, f) => {
            out.push(format!("mov r0, {}", r(a)));
            out.push(format!("bl {f}"));
        }
        Op::LoadStr(a, k) => out.push(format!("ldr {}, .L.str.{k}", r(a))),
        Op::CmpBranch(a, c, cond, l) => {
            out.push(format!("cmp {}, #{c}", r(a)));
            out.push(format!("{} .LBB0_{l}", cond.arm()));
        }
        Op::Jump(l) => out.push(format!("b .LBB0_{l}")),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    /// Operations per block, inclusive range.
    pub min_ops: usize,
    pub max_ops: usize,
    /// Virtual registers available to one block.
    pub reg_pool: usize,
    /// Chance that a block ends in a branch or jump.
    pub terminator_prob: f64,
    /// Chance that a rendering assigns registers by a random permutation
    /// instead of in allocation order of first use.
    pub scramble: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            min_ops: 1,
            max_ops: 8,
            reg_pool: 3,
            terminator_prob: 0.5,
            scramble: 0.3,
        }
    }
}

/// A program as abstract blocks plus edges between block ordinals.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Program {
    pub entry: usize,
    pub blocks: Vec<AbsBlock>,
    pub edges: Vec<[usize; 2]>,
}

pub struct Generator {
    rng: ChaCha8Rng,
    next_id: u64,
    pub cfg: SynthConfig,
}

impl Generator {
    pub fn new(seed: u64, cfg: SynthConfig) -> Self {
        Generator {
            rng: ChaCha8Rng::seed_from_u64(seed),
            next_id: 0,
            cfg,
        }
    }

    fn constant(&mut self) -> i64 {
        match self.rng.random_range(0..10) {
            0..=5 => self.rng.random_range(0..256),
            6 => -self.rng.random_range(1..256),
            7 | 8 => self.rng.random_range(256..65536),
            _ => self.rng.random_range(65536..1 << 30),
        }
    }

    fn op(&mut self, terminator: bool) -> Op {
        let pool = self.cfg.reg_pool.clamp(1, ARM.len());
        let reg = |rng: &mut ChaCha8Rng| rng.random_range(0..pool);
        let rng = &mut self.rng;
        if terminator {
            return if rng.random_bool(0.7) {
                let (a, cond, l) = (reg(rng), *Cond::ALL.choose(rng).expect("nonempty"), rng.random_range(0..400));
                let c = if rng.random_bool(0.5) { rng.random_range(0..64) } else { 0 };
                Op::CmpBranch(a, c, cond, l)
            } else {
                Op::Jump(rng.random_range(0..400))
            };
        }
        let off = |rng: &mut ChaCha8Rng| 4 * rng.random_range(1..16);
        match rng.random_range(0..13) {
            0 => Op::Zero(reg(rng)),
            1 => {
                let a = reg(rng);
                let c = self.constant();
                Op::MovImm(a, c)
            }
            2 => Op::MovReg(reg(rng), reg(rng)),
            3 => Op::Load(reg(rng), off(rng)),
            4 => Op::Store(reg(rng), off(rng)),
            5 => {
                let a = reg(rng);
                let c = self.constant();
                Op::AddImm(a, c)
            }
            6 => Op::AddReg(reg(rng), reg(rng)),
            7 => Op::Sub(reg(rng), reg(rng)),
            8 => Op::Mul(reg(rng), reg(rng)),
            9 => Op::Shift(reg(rng), rng.random_range(1..8)),
            10 => Op::AddMem(reg(rng), off(rng)),
            11 => Op::Call(reg(rng), CALLEES.choose(rng).expect("nonempty")),
            _ => Op::LoadStr(reg(rng), rng.random_range(0..500)),
        }
    }

    /// A fresh block with a new provenance ID.
    pub fn block(&mut self) -> AbsBlock {
        let (lo, hi) = (self.cfg.min_ops.max(1), self.cfg.max_ops.max(self.cfg.min_ops.max(1)));
        self.block_sized(lo, hi)
    }

    /// A fresh block with `lo..=hi` operations.
    pub fn block_sized(&mut self, lo: usize, hi: usize) -> AbsBlock {
        let n = self.rng.random_range(lo..=hi);
        let term = self.rng.random_bool(self.cfg.terminator_prob);
        let mut ops: Vec<Op> = (0..n.saturating_sub(term as usize)).map(|_| self.op(false)).collect();
        if term || ops.is_empty() {
            ops.push(self.op(true));
        }
        let id = self.next_id;
        self.next_id += 1;
        AbsBlock { id, ops }
    }

    /// Render with registers handed out in order of first use, or with a
    /// random assignment at the configured scramble rate.
    pub fn render(&mut self, b: &AbsBlock, arch: Arch) -> BlockRecord {
        let p = self.cfg.scramble.clamp(0.0, 1.0);
        let scrambled = self.rng.random_bool(p);
        self.render_with(b, arch, scrambled)
    }

    /// Render with a random register assignment regardless of the scramble rate.
    pub fn render_scrambled(&mut self, b: &AbsBlock, arch: Arch) -> BlockRecord {
        self.render_with(b, arch, true)
    }

    fn render_with(&mut self, b: &AbsBlock, arch: Arch, scrambled: bool) -> BlockRecord {
        let mut reg: Vec<usize> = (0..ARM.len()).collect();
        if scrambled {
            reg.shuffle(&mut self.rng);
        } else {
            let mut next = 0;
            let mut seen = vec![false; ARM.len()];
            let order = b.ops.iter().flat_map(Op::regs).chain(0..ARM.len());
            for v in order {
                if !seen[v] {
                    seen[v] = true;
                    reg[v] = next;
                    next += 1;
                }
            }
        }
        let mut instrs = Vec::new();
        for op in &b.ops {
            match arch {
                Arch::X86_64 => render_x86(op, &reg, &mut instrs),
                Arch::Arm => render_arm(op, &reg, &mut instrs),
            }
        }
        BlockRecord { id: b.id, instrs }
    }

    /// The same functions rendered for x86-64 and for ARM.
    pub fn corpus(&mut self, functions: usize, blocks_per_function: usize, opt: OptLevel) -> [Vec<FunctionRecord>; 2] {
        let mut x86 = Vec::with_capacity(functions);
        let mut arm = Vec::with_capacity(functions);
        for f in 0..functions {
            let blocks: Vec<AbsBlock> = (0..blocks_per_function).map(|_| self.block()).collect();
            for (arch, out) in [(Arch::X86_64, &mut x86), (Arch::Arm, &mut arm)] {
                out.push(FunctionRecord {
                    name: format!("f{f}"),
                    arch,
                    opt,
                    blocks: blocks.iter().map(|b| self.render(b, arch)).collect(),
                });
            }
        }
        [x86, arm]
    }

    /// A random reducible-looking CFG: a fallthrough chain plus occasional
    /// forward branches and back edges, at most two successors per block.
    pub fn program(&mut self, n: usize) -> Program {
        let blocks: Vec<AbsBlock> = (0..n).map(|_| self.block()).collect();
        let mut edges = Vec::new();
        for i in 0..n.saturating_sub(1) {
            edges.push([i, i + 1]);
            if self.rng.random_bool(0.35) {
                let j = if i > 0 && self.rng.random_bool(0.3) {
                    self.rng.random_range(0..i)
                } else {
                    self.rng.random_range(i + 1..n)
                };
                if j != i + 1 {
                    edges.push([i, j]);
                }
            }
        }
        Program { entry: 0, blocks, edges }
    }

    /// Graft `component` into `host` after a random chain node, with `junk`
    /// spliced onto one of the component's edges. Returns the program and the
    /// host-relative ordinal of the component's entry.
    pub fn plant(&mut self, host: &Program, component: &Program, junk: AbsBlock) -> (Program, usize) {
        let n = host.blocks.len();
        let m = component.blocks.len();
        let mut blocks = host.blocks.clone();
        blocks.extend(component.blocks.iter().cloned());
        let junk_at = blocks.len();
        blocks.push(junk);
        let mut edges = host.edges.clone();
        let u = self.rng.random_range(0..n.saturating_sub(1).max(1));
        let after = (u + 1).min(n - 1);
        edges.push([u, n + component.entry]);
        let mut comp_edges: Vec<[usize; 2]> = component.edges.iter().map(|&[a, b]| [a + n, b + n]).collect();
        if !comp_edges.is_empty() {
            let k = self.rng.random_range(0..comp_edges.len());
            let [a, b] = comp_edges.swap_remove(k);
            comp_edges.push([a, junk_at]);
            comp_edges.push([junk_at, b]);
        } else {
            comp_edges.push([n + component.entry, junk_at]);
        }
        edges.extend(comp_edges);
        for v in 0..m {
            if !component.edges.iter().any(|e| e[0] == v) {
                edges.push([n + v, after]);
            }
        }
        if !edges.iter().any(|e| e[0] == junk_at) {
            edges.push([junk_at, after]);
        }
        (Program { entry: host.entry, blocks, edges }, n + component.entry)
    }

    pub fn render_cfg(&mut self, p: &Program, arch: Arch, opt: OptLevel) -> CfgRecord {
        CfgRecord {
            arch,
            opt,
            entry: p.entry,
            nodes: p.blocks.iter().map(|b| self.render(b, arch)).collect(),
            edges: p.edges.clone(),
        }
    }

    /// Like [`Generator::render_cfg`] but every block gets a random register assignment.
    pub fn render_cfg_scrambled(&mut self, p: &Program, arch: Arch, opt: OptLevel) -> CfgRecord {
        CfgRecord {
            arch,
            opt,
            entry: p.entry,
            nodes: p.blocks.iter().map(|b| self.render_scrambled(b, arch)).collect(),
            edges: p.edges.clone(),
        }
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}
