//! Instruction normalization.
//!
//! Raw assembly lines carry constants, string labels, callee names and jump
//! targets that make the instruction vocabulary grow without bound. The
//! normalizer folds all of them into a handful of placeholders:
//!
//! | raw operand                        | becomes  |
//! |------------------------------------|----------|
//! | numeric constant (`$3`, `#-8`, `16`) | `0` / `-0` |
//! | string literal label (`.L.str.31`, `"abc"`) | `<STR>` |
//! | call target (`callq strncmp`)       | `FOO`    |
//! | any other symbol (`.LBB0_5`)        | `<TAG>`  |
//!
//! Register sigils (`%`) and immediate sigils (`$`, `#`) are dropped, letters
//! are uppercased, and the operand list is re-joined as `OP A,B,C`.

use super::{Arch, Instruction};
use crate::error::{Error, Result};

pub const STR_PLACEHOLDER: &str = "<STR>";
pub const FUNC_PLACEHOLDER: &str = "FOO";
pub const TAG_PLACEHOLDER: &str = "<TAG>";

const CALL_OPCODES: &[&str] = &["CALL", "CALLQ", "CALLL", "BL", "BLX"];

const PREFIXES: &[&str] = &[
    "REP", "REPE", "REPZ", "REPNE", "REPNZ", "LOCK", "NOTRACK", "BND", "DATA16",
];

/// Normalize one raw assembly line.
///
/// ```
/// use xasm::corpus::{normalize_instruction, Arch};
///
/// let n = normalize_instruction("MOVL %ESI, $.L.STR.31", Arch::X86_64).unwrap();
/// assert_eq!(n.as_str(), "MOVL ESI,<STR>");
/// ```
pub fn normalize_instruction(raw: &str, arch: Arch) -> Result<Instruction> {
    let line = strip_comment(raw).trim();
    if line.is_empty() {
        return Err(Error::EmptyInstruction);
    }

    let mut words = line.split_whitespace();
    let mut opcode = words.next().unwrap_or_default().to_ascii_uppercase();
    let mut rest = line[line.find(char::is_whitespace).unwrap_or(line.len())..].trim_start();
    while PREFIXES.contains(&opcode.as_str()) && !rest.is_empty() {
        let next = rest.split_whitespace().next().unwrap_or_default();
        opcode.push(' ');
        opcode.push_str(&next.to_ascii_uppercase());
        rest = rest[next.len()..].trim_start();
    }

    let is_call = CALL_OPCODES.contains(&opcode.as_str());
    let operands: Vec<String> = split_operands(rest)
        .into_iter()
        .map(|op| normalize_operand(op, arch, is_call))
        .filter(|op| !op.is_empty())
        .collect();

    let mut out = opcode;
    if !operands.is_empty() {
        out.push(' ');
        out.push_str(&operands.join(","));
    }
    Ok(Instruction::new(out))
}

fn strip_comment(line: &str) -> &str {
    let mut end = line.len();
    if let Some(i) = line.find(';') {
        end = end.min(i);
    }
    if let Some(i) = line.find("//") {
        end = end.min(i);
    }
    &line[..end]
}

/// Split on commas that are not nested inside brackets, braces, parens or quotes.
fn split_operands(s: &str) -> Vec<&str> {
    let mut parts = Vec::new();
    let mut depth = 0i32;
    let mut in_quote = false;
    let mut start = 0;
    for (i, c) in s.char_indices() {
        match c {
            '"' => in_quote = !in_quote,
            '[' | '{' | '(' if !in_quote => depth += 1,
            ']' | '}' | ')' if !in_quote => depth -= 1,
            ',' if !in_quote && depth == 0 => {
                parts.push(s[start..i].trim());
                start = i + 1;
            }
            _ => {}
        }
    }
    let tail = s[start..].trim();
    if !tail.is_empty() || !parts.is_empty() {
        parts.push(tail);
    }
    parts
}

#[derive(Debug, PartialEq)]
enum Piece {
    Word(String),
    Punct(char),
}

fn normalize_operand(op: &str, arch: Arch, is_call: bool) -> String {
    let chars: Vec<char> = op.chars().collect();
    let mut pieces = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() || c == '%' || c == '$' || c == '#' {
            if c.is_whitespace() {
                pieces.push(Piece::Punct(' '));
            }
            i += 1;
        } else if c == '"' {
            let mut j = i + 1;
            while j < chars.len() && chars[j] != '"' {
                j += 1;
            }
            pieces.push(Piece::Word(STR_PLACEHOLDER.into()));
            i = j + 1;
        } else if c == '<' {
            // Existing placeholders survive a second pass untouched.
            let tail: String = chars[i..].iter().collect();
            let upper = tail.to_ascii_uppercase();
            if upper.starts_with(STR_PLACEHOLDER) {
                pieces.push(Piece::Word(STR_PLACEHOLDER.into()));
                i += STR_PLACEHOLDER.len();
            } else if upper.starts_with(TAG_PLACEHOLDER) {
                pieces.push(Piece::Word(TAG_PLACEHOLDER.into()));
                i += TAG_PLACEHOLDER.len();
            } else {
                pieces.push(Piece::Punct(c));
                i += 1;
            }
        } else if c.is_ascii_digit() {
            let mut j = i;
            while j < chars.len() && (chars[j].is_ascii_alphanumeric() || chars[j] == '_') {
                j += 1;
            }
            let lit: String = chars[i..j].iter().collect();
            let word = if parse_int(&lit) { "0" } else { TAG_PLACEHOLDER };
            pieces.push(Piece::Word(word.into()));
            i = j;
        } else if is_ident_start(c) {
            let mut j = i;
            while j < chars.len() && is_ident_char(chars[j]) {
                j += 1;
            }
            let ident: String = chars[i..j].iter().collect();
            pieces.push(Piece::Word(classify_ident(&ident, arch, is_call)));
            i = j;
        } else {
            pieces.push(Piece::Punct(c));
            i += 1;
        }
    }
    render(&pieces)
}

/// Join pieces with a single space between adjacent words and none elsewhere.
/// Words split only by a dropped sigil also get the space, or they would fuse.
fn render(pieces: &[Piece]) -> String {
    let mut out = String::new();
    let mut last_was_word = false;
    for p in pieces {
        match p {
            Piece::Punct(' ') => {}
            Piece::Punct(c) => {
                out.push(*c);
                last_was_word = false;
            }
            Piece::Word(w) => {
                if last_was_word {
                    out.push(' ');
                }
                out.push_str(w);
                last_was_word = true;
            }
        }
    }
    out
}

fn parse_int(lit: &str) -> bool {
    let lower = lit.to_ascii_lowercase();
    if let Some(hex) = lower.strip_prefix("0x") {
        !hex.is_empty() && u128::from_str_radix(hex, 16).is_ok()
    } else {
        lower.parse::<u128>().is_ok()
    }
}

fn is_ident_start(c: char) -> bool {
    c.is_ascii_alphabetic() || c == '_' || c == '.' || c == '@'
}

fn is_ident_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_' || c == '.' || c == '@' || c == '$'
}

fn classify_ident(ident: &str, arch: Arch, is_call: bool) -> String {
    let upper = ident.to_ascii_uppercase();
    if upper.starts_with(".L.STR") {
        return STR_PLACEHOLDER.into();
    }
    if is_register(&upper, arch) || is_keyword(&upper, arch) {
        return upper;
    }
    let local_label = upper.starts_with(".L");
    if is_call && !local_label {
        return FUNC_PLACEHOLDER.into();
    }
    TAG_PLACEHOLDER.into()
}

fn numbered(name: &str, prefix: &str, max: u32) -> bool {
    name.strip_prefix(prefix)
        .filter(|n| !n.is_empty() && n.len() <= 2 && n.bytes().all(|b| b.is_ascii_digit()))
        .and_then(|n| n.parse::<u32>().ok())
        .is_some_and(|n| n <= max)
}

fn is_register(r: &str, arch: Arch) -> bool {
    match arch {
        Arch::X86_64 => is_x86_register(r),
        Arch::Arm => is_arm_register(r),
    }
}

fn is_x86_register(r: &str) -> bool {
    const NAMED: &[&str] = &[
        "RAX", "RBX", "RCX", "RDX", "RSI", "RDI", "RBP", "RSP", "EAX", "EBX", "ECX", "EDX",
        "ESI", "EDI", "EBP", "ESP", "AX", "BX", "CX", "DX", "SI", "DI", "BP", "SP", "AL", "BL",
        "CL", "DL", "AH", "BH", "CH", "DH", "SIL", "DIL", "BPL", "SPL", "RIP", "EIP", "IP",
        "CS", "DS", "ES", "FS", "GS", "SS", "ST", "EFLAGS", "RFLAGS",
    ];
    if NAMED.contains(&r) {
        return true;
    }
    let extended = ["", "D", "W", "B"].iter().any(|suffix| {
        r.strip_suffix(suffix)
            .and_then(|base| base.strip_prefix('R'))
            .filter(|n| !n.is_empty() && n.bytes().all(|b| b.is_ascii_digit()))
            .and_then(|n| n.parse::<u32>().ok())
            .is_some_and(|n| (8..=15).contains(&n))
    });
    if extended {
        return true;
    }
    ["XMM", "YMM", "ZMM"].iter().any(|p| numbered(r, p, 31))
        || numbered(r, "MM", 7)
        || numbered(r, "K", 7)
        || numbered(r, "ST", 7)
        || numbered(r, "CR", 15)
        || numbered(r, "DR", 15)
}

fn is_arm_register(r: &str) -> bool {
    const NAMED: &[&str] = &[
        "SP", "LR", "PC", "FP", "IP", "SB", "SL", "XZR", "WZR", "WSP", "CPSR", "APSR", "SPSR",
        "FPSCR", "NZCV",
    ];
    NAMED.contains(&r)
        || numbered(r, "R", 15)
        || numbered(r, "X", 30)
        || numbered(r, "W", 30)
        || ["V", "Q", "D", "S", "H", "B"].iter().any(|p| numbered(r, p, 31))
}

fn is_keyword(k: &str, arch: Arch) -> bool {
    const X86: &[&str] = &[
        "BYTE", "WORD", "DWORD", "QWORD", "TBYTE", "XMMWORD", "YMMWORD", "ZMMWORD", "PTR",
        "OFFSET", "FLAT",
    ];
    const ARM: &[&str] = &[
        "LSL", "LSR", "ASR", "ROR", "RRX", "UXTB", "UXTH", "UXTW", "UXTX", "SXTB", "SXTH",
        "SXTW", "SXTX", "EQ", "NE", "CS", "CC", "HS", "LO", "MI", "PL", "VS", "VC", "HI", "LS",
        "GE", "LT", "GT", "LE", "AL",
    ];
    match arch {
        Arch::X86_64 => X86.contains(&k),
        Arch::Arm => ARM.contains(&k),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn norm(s: &str, arch: Arch) -> String {
        normalize_instruction(s, arch).unwrap().as_str().to_owned()
    }

    #[test]
    fn string_labels_constants_and_jump_targets() {
        assert_eq!(norm("MOVL %ESI, $.L.STR.31", Arch::X86_64), "MOVL ESI,<STR>");
        assert_eq!(norm("MOVL %EDX, $3", Arch::X86_64), "MOVL EDX,0");
        assert_eq!(norm("JE .LBB0_5", Arch::X86_64), "JE <TAG>");
        assert_eq!(norm("CALLQ STRNCMP", Arch::X86_64), "CALLQ FOO");
    }

    #[test]
    fn already_normalized_is_fixed_point() {
        for s in ["MOVL EDX,0", "JE <TAG>", "CALLQ FOO", "MOVL ESI,<STR>", "MOVQ RDI,[RBP-0]"] {
            assert_eq!(norm(s, Arch::X86_64), s);
        }
    }

    #[test]
    fn memory_displacements_and_signs() {
        assert_eq!(norm("movq %rax, [%rbp-16]", Arch::X86_64), "MOVQ RAX,[RBP-0]");
        assert_eq!(norm("movq -16(%rbp), %rax", Arch::X86_64), "MOVQ -0(RBP),RAX");
        assert_eq!(norm("addq %rsp, $-0x20", Arch::X86_64), "ADDQ RSP,-0");
        assert_eq!(norm("ldr r0, [sp, #8]", Arch::Arm), "LDR R0,[SP,0]");
        assert_eq!(norm("str r1, [r2, #-4]!", Arch::Arm), "STR R1,[R2,-0]!");
    }

    #[test]
    fn arm_calls_lists_and_shifts() {
        assert_eq!(norm("bl memcpy", Arch::Arm), "BL FOO");
        assert_eq!(norm("bl .LBB3_2", Arch::Arm), "BL <TAG>");
        assert_eq!(norm("push {r4, r5, lr}", Arch::Arm), "PUSH {R4,R5,LR}");
        assert_eq!(norm("add r0, r1, r2, lsl #2", Arch::Arm), "ADD R0,R1,R2,LSL 0");
        assert_eq!(norm("ldr r1, .L.str.7", Arch::Arm), "LDR R1,<STR>");
        assert_eq!(norm("b .LBB0_1", Arch::Arm), "B <TAG>");
    }

    #[test]
    fn x86_registers_are_kept() {
        assert_eq!(norm("movzbl %r12d, (%rbx)", Arch::X86_64), "MOVZBL R12D,(RBX)");
        assert_eq!(norm("testq %r12, %r12", Arch::X86_64), "TESTQ R12,R12");
        assert_eq!(norm("movss %xmm0, %xmm15", Arch::X86_64), "MOVSS XMM0,XMM15");
        assert_eq!(norm("mov rax, qword ptr [rip + foo]", Arch::X86_64), "MOV RAX,QWORD PTR[RIP+<TAG>]");
        assert_eq!(norm("movq %rdx, sym(%rip)", Arch::X86_64), "MOVQ RDX,<TAG>(RIP)");
    }

    #[test]
    fn prefixes_quotes_and_calls_through_plt() {
        assert_eq!(norm("rep movsb", Arch::X86_64), "REP MOVSB");
        assert_eq!(norm("callq strlen@PLT", Arch::X86_64), "CALLQ FOO");
        assert_eq!(norm("callq *%rax", Arch::X86_64), "CALLQ *RAX");
        assert_eq!(norm("leaq %rdi, \"a, b\"", Arch::X86_64), "LEAQ RDI,<STR>");
        assert_eq!(norm("ret", Arch::X86_64), "RET");
        assert_eq!(norm("  nop   ; padding", Arch::X86_64), "NOP");
    }

    #[test]
    fn blank_input_is_rejected() {
        assert!(matches!(normalize_instruction("   ", Arch::X86_64), Err(Error::EmptyInstruction)));
        assert!(matches!(normalize_instruction("; only a comment", Arch::Arm), Err(Error::EmptyInstruction)));
    }

    #[test]
    fn non_integer_digit_tokens_become_tags() {
        assert_eq!(norm("jmp 1f", Arch::X86_64), "JMP <TAG>");
        assert_eq!(norm("movl %eax, $0xfF", Arch::X86_64), "MOVL EAX,0");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn operand() -> impl Strategy<Value = String> {
            prop_oneof![
                "%[a-z][a-z0-9]{1,3}",
                "[$#]-?[0-9]{1,6}",
                "\\$0x[0-9a-f]{1,4}",
                "\\.L\\.str\\.[0-9]{1,3}",
                "\\.LBB[0-9]_[0-9]{1,2}",
                "-?[0-9]{1,3}\\(%r[a-z]{2}\\)",
                "\\[[a-z][a-z0-9], #-?[0-9]{1,3}\\]",
                "[a-z_]{1,8}",
            ]
        }

        fn line() -> impl Strategy<Value = String> {
            ("[a-z]{2,5}", prop::collection::vec(operand(), 0..3))
                .prop_map(|(op, args)| if args.is_empty() { op } else { format!("{op} {}", args.join(", ")) })
        }

        proptest! {
            #[test]
            fn idempotent_and_deterministic(l in line(), arm in any::<bool>()) {
                let arch = if arm { Arch::Arm } else { Arch::X86_64 };
                let once = normalize_instruction(&l, arch).unwrap();
                prop_assert_eq!(&once, &normalize_instruction(&l, arch).unwrap());
                prop_assert_eq!(&normalize_instruction(once.as_str(), arch).unwrap(), &once);
            }

            #[test]
            fn output_has_no_sigils_or_lowercase(l in line()) {
                let n = normalize_instruction(&l, Arch::X86_64).unwrap();
                let n = n.as_str();
                prop_assert!(!n.contains('%') && !n.contains('$'));
                prop_assert!(!n.replace("<STR>", "").replace("<TAG>", "").chars().any(|c| c.is_ascii_lowercase()));
            }
        }
    }
}
