//! A pragmatic model of LLVM textual IR.
//!
//! Only block structure is decoded. Every instruction is kept as its source
//! text, so a parse/emit cycle reproduces the input line for line; the only
//! edits this module ever makes are the two insertion operations below.
//!
//! Top-level constructs other than `define`/`declare` (globals, type
//! definitions, attribute groups, metadata, module asm) are carried as opaque
//! segments in their original position.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

const TERMINATORS: &[&str] = &[
    "ret",
    "br",
    "switch",
    "indirectbr",
    "invoke",
    "callbr",
    "resume",
    "catchswitch",
    "catchret",
    "cleanupret",
    "unreachable",
];

/// Instructions that must stay at the top of a block.
const BLOCK_HEAD_OPCODES: &[&str] = &["phi", "landingpad", "catchpad", "cleanuppad"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InstKind {
    /// An ordinary instruction, counted toward the unit of work.
    Normal,
    /// The block terminator (also counted).
    Terminator,
    /// A call to an `llvm.dbg.*` intrinsic; not counted.
    DebugIntrinsic,
    /// A `#dbg_*` debug record line; not an instruction, not counted.
    DebugRecord,
    /// A blank or comment line inside a block body.
    Trivia,
    /// A line added by one of the insertion operations; never counted.
    Inserted,
}

impl InstKind {
    pub fn counts(self) -> bool {
        matches!(self, InstKind::Normal | InstKind::Terminator)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instruction {
    /// Source text, possibly spanning several physical lines (e.g. `switch`).
    pub text: String,
    pub kind: InstKind,
}

impl Instruction {
    /// The opcode, with any `%x =` result binding and call-site prefixes stripped.
    pub fn opcode(&self) -> &str {
        opcode_of(&self.text)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IRBasicBlock {
    /// Block name as referenced in the function (without `%`). Synthesized when
    /// the source has no label line.
    pub label: String,
    /// The original label line, `None` for an implicit block.
    pub label_line: Option<String>,
    /// Blank/comment lines preceding the label.
    pub leading: Vec<String>,
    /// Body lines; the last entry is always the terminator.
    pub instructions: Vec<Instruction>,
}

impl IRBasicBlock {
    pub fn terminator_index(&self) -> usize {
        self.instructions.len() - 1
    }

    pub fn terminator(&self) -> &Instruction {
        &self.instructions[self.terminator_index()]
    }

    /// Number of counted IR instructions: every instruction including the
    /// terminator, excluding debug intrinsics and inserted lines.
    pub fn inst_count(&self) -> u64 {
        self.instructions.iter().filter(|i| i.kind.counts()).count() as u64
    }

    /// Inserts `call_line` so that it executes after every original
    /// non-terminator instruction of the block.
    ///
    /// A `musttail` call must be immediately followed by its `ret`, so in that
    /// case the line goes in front of the call instead.
    pub fn insert_call_before_terminator(&mut self, call_line: &str) {
        let mut at = self.terminator_index();
        if let Some(prev) = self.instructions[..at]
            .iter()
            .rposition(|i| !matches!(i.kind, InstKind::Trivia | InstKind::DebugRecord))
        {
            if is_musttail(&self.instructions[prev].text) {
                at = prev;
            }
        }
        self.instructions.insert(
            at,
            Instruction {
                text: call_line.to_string(),
                kind: InstKind::Inserted,
            },
        );
    }

    /// Inserts `line` at the first legal position at the head of the block:
    /// after phis and EH pads.
    pub fn insert_at_block_start(&mut self, line: &str) {
        let mut at = 0;
        for (idx, inst) in self.instructions.iter().enumerate() {
            match inst.kind {
                InstKind::Trivia | InstKind::DebugRecord => continue,
                _ if BLOCK_HEAD_OPCODES.contains(&inst.opcode()) => at = idx + 1,
                _ => break,
            }
        }
        self.instructions.insert(
            at,
            Instruction {
                text: line.to_string(),
                kind: InstKind::Inserted,
            },
        );
    }

    /// Inserts `line` after any leading `alloca`s (entry-block initialization).
    pub(crate) fn insert_after_allocas(&mut self, line: &str) {
        let mut at = 0;
        for (idx, inst) in self.instructions.iter().enumerate() {
            match inst.kind {
                InstKind::Trivia | InstKind::DebugRecord => continue,
                _ if inst.opcode() == "alloca" => at = idx + 1,
                _ => break,
            }
        }
        self.instructions.insert(
            at,
            Instruction {
                text: line.to_string(),
                kind: InstKind::Inserted,
            },
        );
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IRFunction {
    /// Symbol name without the `@` sigil (quotes preserved if present).
    pub name: String,
    pub is_definition: bool,
    /// The `define ... {` or `declare ...` line.
    pub header: String,
    pub blocks: Vec<IRBasicBlock>,
    /// Lines after the last block and before the closing brace.
    pub trailer: Vec<String>,
    pub closing: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Item {
    Opaque(String),
    Function(IRFunction),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IRModule {
    pub source_path: String,
    pub items: Vec<Item>,
}

impl IRModule {
    pub fn functions(&self) -> impl Iterator<Item = &IRFunction> {
        self.items.iter().filter_map(|i| match i {
            Item::Function(f) => Some(f),
            Item::Opaque(_) => None,
        })
    }

    pub fn functions_mut(&mut self) -> impl Iterator<Item = &mut IRFunction> {
        self.items.iter_mut().filter_map(|i| match i {
            Item::Function(f) => Some(f),
            Item::Opaque(_) => None,
        })
    }

    pub fn definitions(&self) -> impl Iterator<Item = &IRFunction> {
        self.functions().filter(|f| f.is_definition)
    }

    /// Mutable access to every defined block in module order; the position in
    /// this sequence is the block's id.
    pub fn blocks_mut(&mut self) -> impl Iterator<Item = &mut IRBasicBlock> {
        self.functions_mut()
            .filter(|f| f.is_definition)
            .flat_map(|f| f.blocks.iter_mut())
    }

    pub fn block_mut(&mut self, bb_id: u64) -> Option<&mut IRBasicBlock> {
        usize::try_from(bb_id)
            .ok()
            .and_then(|n| self.blocks_mut().nth(n))
    }

    pub fn function(&self, name: &str) -> Option<&IRFunction> {
        self.functions().find(|f| f.name == name)
    }

    pub fn function_mut(&mut self, name: &str) -> Option<&mut IRFunction> {
        self.functions_mut().find(|f| f.name == name)
    }

    pub fn has_symbol_declared(&self, name: &str) -> bool {
        self.functions().any(|f| f.name == name)
    }

    /// Appends a `declare` line for `name` unless the module already has it.
    pub fn declare_function(&mut self, name: &str, declaration: &str) {
        if self.has_symbol_declared(name) {
            return;
        }
        self.items.push(Item::Function(IRFunction {
            name: name.to_string(),
            is_definition: false,
            header: declaration.to_string(),
            blocks: Vec::new(),
            trailer: Vec::new(),
            closing: String::new(),
        }));
    }

    /// Sum of counted instructions over every defined block.
    pub fn total_inst_count(&self) -> u64 {
        self.definitions()
            .flat_map(|f| f.blocks.iter())
            .map(IRBasicBlock::inst_count)
            .sum()
    }

    pub fn emit(&self) -> String {
        let mut out = String::new();
        for item in &self.items {
            match item {
                Item::Opaque(line) => push_line(&mut out, line),
                Item::Function(f) => emit_function(&mut out, f),
            }
        }
        out
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        crate::write_atomic(path, self.emit().as_bytes())
    }

    pub fn from_file(path: &Path) -> Result<IRModule> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        parse_module_named(&text, &path.display().to_string())
    }
}

fn push_line(out: &mut String, line: &str) {
    out.push_str(line);
    out.push('\n');
}

fn emit_function(out: &mut String, f: &IRFunction) {
    push_line(out, &f.header);
    if !f.is_definition {
        return;
    }
    for block in &f.blocks {
        for l in &block.leading {
            push_line(out, l);
        }
        if let Some(l) = &block.label_line {
            push_line(out, l);
        }
        for inst in &block.instructions {
            push_line(out, &inst.text);
        }
    }
    for l in &f.trailer {
        push_line(out, l);
    }
    push_line(out, &f.closing);
}

pub fn parse_module(text: &str) -> Result<IRModule> {
    parse_module_named(text, "<memory>")
}

pub fn parse_module_named(text: &str, source_path: &str) -> Result<IRModule> {
    let mut parser = Parser {
        lines: text.lines().map(|l| l.trim_end()).collect(),
        pos: 0,
    };
    let mut items = Vec::new();
    while let Some(line) = parser.next_line() {
        let trimmed = line.trim_start();
        if trimmed.starts_with("define ") || trimmed == "define" {
            items.push(Item::Function(parser.parse_definition(line)?));
        } else if trimmed.starts_with("declare ") {
            items.push(Item::Function(IRFunction {
                name: function_name(line)
                    .ok_or_else(|| malformed(parser.pos, "declaration without a function name"))?,
                is_definition: false,
                header: line.to_string(),
                blocks: Vec::new(),
                trailer: Vec::new(),
                closing: String::new(),
            }));
        } else if trimmed == "}" {
            return Err(malformed(
                parser.pos,
                "unbalanced closing brace at top level",
            ));
        } else {
            items.push(Item::Opaque(line.to_string()));
        }
    }
    Ok(IRModule {
        source_path: source_path.to_string(),
        items,
    })
}

fn malformed(line: usize, msg: impl Into<String>) -> Error {
    Error::MalformedIR {
        line,
        msg: msg.into(),
    }
}

struct Parser<'a> {
    lines: Vec<&'a str>,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn next_line(&mut self) -> Option<&'a str> {
        let l = self.lines.get(self.pos).copied();
        if l.is_some() {
            self.pos += 1;
        }
        l
    }

    fn parse_definition(&mut self, header: &'a str) -> Result<IRFunction> {
        let start = self.pos;
        let name = function_name(header)
            .ok_or_else(|| malformed(start, "definition without a function name"))?;
        if !strip_comment(header).trim_end().ends_with('{') {
            return Err(malformed(
                start,
                format!("definition of @{name} has no opening brace"),
            ));
        }

        let mut blocks: Vec<IRBasicBlock> = Vec::new();
        let mut pending: Vec<String> = Vec::new();
        let mut current: Option<IRBasicBlock> = None;
        let mut seen = HashSet::new();
        let mut implicit = 0usize;

        loop {
            let Some(line) = self.next_line() else {
                return Err(malformed(self.pos, format!("unterminated body of @{name}")));
            };
            let trimmed = line.trim();
            if trimmed == "}" {
                if let Some(b) = current.take() {
                    blocks.push(close_block(b, &mut pending, self.pos, &name)?);
                }
                if blocks.is_empty() {
                    return Err(malformed(
                        self.pos,
                        format!("definition of @{name} has no blocks"),
                    ));
                }
                return Ok(IRFunction {
                    name,
                    is_definition: true,
                    header: header.to_string(),
                    blocks,
                    trailer: pending,
                    closing: line.to_string(),
                });
            }
            if trimmed.is_empty() || trimmed.starts_with(';') {
                match current.as_mut() {
                    Some(b) => b.instructions.push(Instruction {
                        text: line.to_string(),
                        kind: InstKind::Trivia,
                    }),
                    None => pending.push(line.to_string()),
                }
                continue;
            }
            if let Some(label) = parse_label(line) {
                if let Some(b) = current.take() {
                    blocks.push(close_block(b, &mut pending, self.pos, &name)?);
                }
                if !seen.insert(label.clone()) {
                    return Err(malformed(
                        self.pos,
                        format!("duplicate block label %{label} in @{name}"),
                    ));
                }
                current = Some(IRBasicBlock {
                    label,
                    label_line: Some(line.to_string()),
                    leading: std::mem::take(&mut pending),
                    instructions: Vec::new(),
                });
                continue;
            }
            if trimmed.starts_with("uselistorder") {
                if let Some(b) = current.take() {
                    blocks.push(close_block(b, &mut pending, self.pos, &name)?);
                }
                pending.push(line.to_string());
                continue;
            }

            // An instruction, possibly continued over several lines.
            let mut text = line.to_string();
            let mut depth = bracket_depth(line);
            while depth > 0 {
                let Some(next) = self.next_line() else {
                    return Err(malformed(self.pos, "unbalanced brackets in instruction"));
                };
                text.push('\n');
                text.push_str(next);
                depth += bracket_depth(next);
            }
            let kind = classify(&text);

            // Code after a terminator without a label line starts an
            // implicitly numbered block.
            let terminated = current.as_ref().is_some_and(|b| {
                b.instructions
                    .iter()
                    .any(|i| i.kind == InstKind::Terminator)
            });
            if terminated {
                let b = current.take().expect("checked above");
                blocks.push(close_block(b, &mut pending, self.pos, &name)?);
            }
            if current.is_none() {
                let label = loop {
                    let candidate = if blocks.is_empty() && implicit == 0 {
                        "entry".to_string()
                    } else {
                        format!("implicit.{implicit}")
                    };
                    implicit += 1;
                    if !seen.contains(&candidate) {
                        break candidate;
                    }
                };
                seen.insert(label.clone());
                current = Some(IRBasicBlock {
                    label,
                    label_line: None,
                    leading: std::mem::take(&mut pending),
                    instructions: Vec::new(),
                });
            }
            current
                .as_mut()
                .expect("block opened above")
                .instructions
                .push(Instruction { text, kind });
        }
    }
}

/// Validates a finished block and moves blank/comment lines that follow its
/// terminator into `pending`.
fn close_block(
    mut block: IRBasicBlock,
    pending: &mut Vec<String>,
    line: usize,
    func: &str,
) -> Result<IRBasicBlock> {
    let Some(term) = block
        .instructions
        .iter()
        .rposition(|i| !matches!(i.kind, InstKind::Trivia | InstKind::DebugRecord))
        .filter(|&p| block.instructions[p].kind == InstKind::Terminator)
    else {
        return Err(malformed(
            line,
            format!("block %{} in @{func} has no terminator", block.label),
        ));
    };
    let trailing: Vec<String> = block
        .instructions
        .drain(term + 1..)
        .map(|i| i.text)
        .collect();
    // pending is empty here unless lines arrived after the block was closed.
    let mut moved = trailing;
    moved.append(pending);
    *pending = moved;
    Ok(block)
}

/// Returns the label name for a label line such as `bb1:`, `10:  ; preds = %2`
/// or `"odd name":`.
fn parse_label(line: &str) -> Option<String> {
    if line.starts_with(|c: char| c.is_whitespace()) {
        return None;
    }
    let code = strip_comment(line).trim_end();
    let body = code.strip_suffix(':')?;
    if body.is_empty() {
        return None;
    }
    if let Some(q) = body.strip_prefix('"') {
        let inner = q.strip_suffix('"')?;
        return Some(format!("\"{inner}\""));
    }
    body.chars()
        .all(|c| c.is_ascii_alphanumeric() || "-$._".contains(c))
        .then(|| body.to_string())
}

fn function_name(header: &str) -> Option<String> {
    let at = header.find('@')?;
    let rest = &header[at + 1..];
    if let Some(q) = rest.strip_prefix('"') {
        let end = q.find('"')?;
        return Some(format!("\"{}\"", &q[..end]));
    }
    let end = rest
        .find(|c: char| !(c.is_ascii_alphanumeric() || "-$._".contains(c)))
        .unwrap_or(rest.len());
    (end > 0).then(|| rest[..end].to_string())
}

/// Drops a trailing `; comment`, respecting quoted strings.
fn strip_comment(line: &str) -> &str {
    let mut in_str = false;
    for (i, c) in line.char_indices() {
        match c {
            '"' => in_str = !in_str,
            ';' if !in_str => return &line[..i],
            _ => {}
        }
    }
    line
}

fn bracket_depth(line: &str) -> i64 {
    let mut depth = 0;
    let mut in_str = false;
    for c in line.chars() {
        match c {
            '"' => in_str = !in_str,
            ';' if !in_str => break,
            '[' if !in_str => depth += 1,
            ']' if !in_str => depth -= 1,
            _ => {}
        }
    }
    depth
}

fn opcode_of(text: &str) -> &str {
    let mut s = text.trim_start();
    if s.starts_with('%') {
        // Skip the result binding `%name = `.
        let after_name = if let Some(q) = s[1..].strip_prefix('"') {
            q.find('"').map_or("", |e| &q[e + 1..])
        } else {
            let end = s[1..]
                .find(|c: char| !(c.is_ascii_alphanumeric() || "-$._".contains(c)))
                .map_or(s.len(), |e| e + 1);
            &s[end..]
        };
        s = after_name
            .trim_start()
            .strip_prefix('=')
            .unwrap_or(after_name)
            .trim_start();
    }
    let mut words = s.split_whitespace();
    let mut op = words.next().unwrap_or("");
    while matches!(op, "tail" | "musttail" | "notail") {
        op = words.next().unwrap_or("");
    }
    op
}

fn is_musttail(text: &str) -> bool {
    let s = text.trim_start();
    s.split_whitespace().take(4).any(|w| w == "musttail")
}

fn classify(text: &str) -> InstKind {
    let trimmed = text.trim_start();
    if trimmed.starts_with("#dbg_") {
        return InstKind::DebugRecord;
    }
    let op = opcode_of(text);
    if TERMINATORS.contains(&op) {
        InstKind::Terminator
    } else if op == "call" && text.contains("@llvm.dbg.") {
        InstKind::DebugIntrinsic
    } else {
        InstKind::Normal
    }
}

/// One row of the block table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockEntry {
    pub bb_id: u64,
    pub function_name: String,
    pub block_label: String,
    pub inst_count: u64,
}

/// Dense, module-ordered identity for every defined block.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BlockTable {
    pub entries: Vec<BlockEntry>,
}

impl BlockTable {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, bb_id: u64) -> Option<&BlockEntry> {
        usize::try_from(bb_id)
            .ok()
            .and_then(|i| self.entries.get(i))
    }

    pub fn inst_count(&self, bb_id: u64) -> Option<u64> {
        self.get(bb_id).map(|e| e.inst_count)
    }

    pub fn max_inst_count(&self) -> u64 {
        self.entries.iter().map(|e| e.inst_count).max().unwrap_or(0)
    }

    pub fn total_inst_count(&self) -> u64 {
        self.entries.iter().map(|e| e.inst_count).sum()
    }

    /// `bbid.map` text: `bb_id<TAB>function<TAB>label<TAB>inst_count` per line.
    pub fn to_map_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}",
                e.bb_id, e.function_name, e.block_label, e.inst_count
            );
        }
        out
    }

    pub fn parse_map_text(text: &str) -> Result<BlockTable> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let fields: Vec<&str> = line.split('\t').collect();
            let bad = || Error::BadBlockMap {
                line: n + 1,
                msg: format!("expected 4 tab-separated fields, got {line:?}"),
            };
            if fields.len() != 4 {
                return Err(bad());
            }
            let bb_id: u64 = fields[0].parse().map_err(|_| bad())?;
            let inst_count: u64 = fields[3].parse().map_err(|_| bad())?;
            if bb_id != n as u64 {
                return Err(Error::BadBlockMap {
                    line: n + 1,
                    msg: format!("bb_id {bb_id} out of sequence"),
                });
            }
            if inst_count == 0 {
                return Err(Error::BadBlockMap {
                    line: n + 1,
                    msg: "inst_count must be at least 1".into(),
                });
            }
            entries.push(BlockEntry {
                bb_id,
                function_name: fields[1].to_string(),
                block_label: fields[2].to_string(),
                inst_count,
            });
        }
        Ok(BlockTable { entries })
    }

    pub fn write_map(&self, path: &Path) -> Result<()> {
        crate::write_atomic(path, self.to_map_text().as_bytes())
    }

    pub fn read_map(path: &Path) -> Result<BlockTable> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_map_text(&text)
    }
}

pub fn build_block_table(module: &IRModule) -> BlockTable {
    let entries = module
        .definitions()
        .flat_map(|f| f.blocks.iter().map(move |b| (f, b)))
        .enumerate()
        .map(|(id, (f, b))| BlockEntry {
            bb_id: id as u64,
            function_name: f.name.clone(),
            block_label: b.label.clone(),
            inst_count: b.inst_count(),
        })
        .collect();
    BlockTable { entries }
}

/// Inline-asm line that places a global label at the current position.
///
/// `noduplicate` keeps later optimization from cloning the block, which would
/// define the label twice.
pub fn label_asm_line(symbol: &str) -> String {
    format!(
        "  call void asm sideeffect \".globl {symbol}\\0A{symbol}:\", \"\"() noduplicate nounwind"
    )
}

/// Makes `symbol` an assembly-visible global label at the start of block
/// `bb_id`, so its program-counter address can be read from the linked binary.
pub fn attach_block_label_symbol(module: &mut IRModule, bb_id: u64, symbol: &str) -> Result<()> {
    let block = module.block_mut(bb_id).ok_or(Error::UnknownBlock(bb_id))?;
    block.insert_at_block_start(&label_asm_line(symbol));
    Ok(())
}

/// Writes `bytes` to a temporary sibling then renames it over `path`.
pub(crate) fn write_file_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all().ok();
    }
    std::fs::rename(&tmp, path)
}
