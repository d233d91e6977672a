use std::collections::{BTreeMap, BTreeSet, HashMap};

use indexmap::IndexMap;

use super::{
    BasicBlock, Dim3, FunctionGraph, GpuOp, JobClass, LaunchOp, Op, OpId, Program, TraceError,
    MAX_THREADS_PER_BLOCK,
};

#[derive(Debug, Clone, Copy)]
struct Tok<'a> {
    text: &'a str,
    col: usize,
}

fn tokenize(line: &str) -> Vec<Tok<'_>> {
    let line = match line.find('#') {
        Some(i) => &line[..i],
        None => line,
    };
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in line.char_indices() {
        if c.is_whitespace() {
            if let Some(s) = start.take() {
                out.push(Tok { text: &line[s..i], col: line[..s].chars().count() + 1 });
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        out.push(Tok { text: &line[s..], col: line[..s].chars().count() + 1 });
    }
    out
}

fn is_ident(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
}

struct Cursor<'a> {
    line: usize,
    toks: Vec<Tok<'a>>,
    pos: usize,
    end_col: usize,
}

impl<'a> Cursor<'a> {
    fn err(&self, col: usize, msg: impl Into<String>) -> TraceError {
        TraceError::Syntax { line: self.line, col, msg: msg.into() }
    }

    fn peek(&self) -> Option<Tok<'a>> {
        self.toks.get(self.pos).copied()
    }

    fn next(&mut self, what: &str) -> Result<Tok<'a>, TraceError> {
        match self.toks.get(self.pos) {
            Some(t) => {
                self.pos += 1;
                Ok(*t)
            }
            None => Err(self.err(self.end_col, format!("expected {what}"))),
        }
    }

    fn ident(&mut self, what: &str) -> Result<String, TraceError> {
        let t = self.next(what)?;
        if is_ident(t.text) {
            Ok(t.text.to_string())
        } else {
            Err(self.err(t.col, format!("invalid {what} `{}`", t.text)))
        }
    }

    fn number(&mut self, what: &str) -> Result<u64, TraceError> {
        let t = self.next(what)?;
        t.text
            .parse::<u64>()
            .map_err(|_| self.err(t.col, format!("expected {what}, found `{}`", t.text)))
    }

    fn positive_u32(&mut self, what: &str) -> Result<u32, TraceError> {
        let t = self.next(what)?;
        match t.text.parse::<u32>() {
            Ok(v) if v > 0 => Ok(v),
            _ => Err(self.err(t.col, format!("expected positive {what}, found `{}`", t.text))),
        }
    }

    fn keyword(&mut self, kw: &str) -> Result<(), TraceError> {
        let t = self.next(&format!("`{kw}`"))?;
        if t.text == kw {
            Ok(())
        } else {
            Err(self.err(t.col, format!("expected `{kw}`, found `{}`", t.text)))
        }
    }

    fn dim3(&mut self, what: &str) -> Result<Dim3, TraceError> {
        Ok(Dim3::new(self.positive_u32(what)?, self.positive_u32(what)?, self.positive_u32(what)?))
    }

    fn lazy_flag(&mut self) -> Result<bool, TraceError> {
        match self.peek() {
            Some(t) if t.text == "lazy" => {
                self.pos += 1;
                Ok(true)
            }
            _ => Ok(false),
        }
    }

    fn finish(&self) -> Result<(), TraceError> {
        match self.peek() {
            Some(t) => Err(self.err(t.col, format!("unexpected token `{}`", t.text))),
            None => Ok(()),
        }
    }
}

/// Parses milliseconds with up to microsecond precision.
fn parse_duration_us(cur: &mut Cursor<'_>) -> Result<u64, TraceError> {
    let t = cur.next("duration in ms")?;
    let ok = !t.text.is_empty()
        && t.text.chars().all(|c| c.is_ascii_digit() || c == '.')
        && t.text.matches('.').count() <= 1;
    let ms: f64 = if ok { t.text.parse().unwrap_or(f64::NAN) } else { f64::NAN };
    if !ms.is_finite() {
        return Err(cur.err(t.col, format!("expected duration in ms, found `{}`", t.text)));
    }
    let us = (ms * 1000.0).round();
    if us < 1.0 || us > u64::MAX as f64 {
        return Err(cur.err(t.col, "kernel duration must be positive"));
    }
    Ok(us as u64)
}

struct FuncBuilder {
    name: String,
    blocks: IndexMap<String, BasicBlock>,
    block_lines: HashMap<String, usize>,
    current: Option<String>,
}

impl FuncBuilder {
    fn current_block(&mut self, line: usize) -> &mut BasicBlock {
        if self.current.is_none() {
            let label = "entry".to_string();
            self.blocks.insert(label.clone(), BasicBlock::new(label.clone()));
            self.block_lines.insert(label.clone(), line);
            self.current = Some(label);
        }
        let label = self.current.as_ref().unwrap();
        self.blocks.get_mut(label).unwrap()
    }
}

struct OpSite {
    line: usize,
    func: String,
}

/// Parses and validates a `.gput` trace.
pub fn parse_program(text: &str) -> Result<Program, TraceError> {
    let mut name: Option<String> = None;
    let mut class = None;
    let mut functions: IndexMap<String, FunctionGraph> = IndexMap::new();
    let mut block_lines: HashMap<(String, String), usize> = HashMap::new();
    let mut op_sites: BTreeMap<OpId, OpSite> = BTreeMap::new();
    let mut current: Option<FuncBuilder> = None;
    let mut next_id: OpId = 0;
    let mut last_line = 0;

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        last_line = line;
        let toks = tokenize(raw);
        let Some(head) = toks.first().copied() else { continue };
        let end_col = raw.trim_end().chars().count() + 1;
        let mut cur = Cursor { line, toks, pos: 1, end_col };

        match head.text {
            "program" => {
                if name.is_some() {
                    return Err(cur.err(head.col, "duplicate `program` header"));
                }
                name = Some(cur.ident("program name")?);
                cur.finish()?;
                continue;
            }
            "class" => {
                if current.is_some() || !functions.is_empty() {
                    return Err(cur.err(head.col, "`class` must precede all functions"));
                }
                let t = cur.next("job class")?;
                class = Some(match t.text {
                    "small" => JobClass::Small,
                    "large" => JobClass::Large,
                    other => return Err(cur.err(t.col, format!("unknown job class `{other}`"))),
                });
                cur.finish()?;
                continue;
            }
            _ => {}
        }
        if name.is_none() {
            return Err(cur.err(head.col, "expected `program <name>` header"));
        }

        match head.text {
            "func" => {
                if current.is_some() {
                    return Err(cur.err(head.col, "nested `func` (missing `end`)"));
                }
                let fname = cur.ident("function name")?;
                cur.finish()?;
                if functions.contains_key(&fname) {
                    return Err(cur.err(head.col, format!("duplicate function `{fname}`")));
                }
                current = Some(FuncBuilder {
                    name: fname,
                    blocks: IndexMap::new(),
                    block_lines: HashMap::new(),
                    current: None,
                });
            }
            "end" => {
                cur.finish()?;
                let Some(mut fb) = current.take() else {
                    return Err(cur.err(head.col, "`end` outside of a function"));
                };
                if fb.blocks.is_empty() {
                    fb.current_block(line);
                }
                for (label, l) in fb.block_lines.drain() {
                    block_lines.insert((fb.name.clone(), label), l);
                }
                functions.insert(fb.name.clone(), FunctionGraph { name: fb.name, blocks: fb.blocks });
            }
            "block" => {
                let Some(fb) = current.as_mut() else {
                    return Err(cur.err(head.col, "`block` outside of a function"));
                };
                let label = cur.ident("block label")?;
                let mut block = BasicBlock::new(label.clone());
                if let Some(t) = cur.peek() {
                    if t.text == "succ" {
                        cur.pos += 1;
                        block.succs.push(cur.ident("successor label")?);
                        if let Some(t) = cur.peek() {
                            if t.text != "prob" {
                                block.succs.push(cur.ident("successor label")?);
                            }
                        }
                    }
                }
                if let Some(t) = cur.peek() {
                    if t.text == "prob" {
                        cur.pos += 1;
                        if block.succs.len() != 2 {
                            return Err(cur.err(t.col, "`prob` requires two successors"));
                        }
                        let p = cur.next("probability")?;
                        match p.text.parse::<f64>() {
                            Ok(v) if (0.0..=1.0).contains(&v) => block.taken_prob = Some(v),
                            _ => {
                                return Err(cur.err(p.col, format!("invalid probability `{}`", p.text)))
                            }
                        }
                    }
                }
                cur.finish()?;
                if block.succs.len() == 2 && block.succs[0] == block.succs[1] {
                    return Err(cur.err(head.col, "duplicate successor label"));
                }
                if fb.blocks.contains_key(&label) {
                    return Err(cur.err(head.col, format!("duplicate block label `{label}`")));
                }
                fb.blocks.insert(label.clone(), block);
                fb.block_lines.insert(label.clone(), line);
                fb.current = Some(label);
            }
            kw => {
                let Some(fb) = current.as_mut() else {
                    return Err(cur.err(head.col, format!("`{kw}` outside of a function")));
                };
                let (op, lazy) = parse_op(kw, head.col, &mut cur)?;
                cur.finish()?;
                let id = next_id;
                next_id += 1;
                op_sites.insert(id, OpSite { line, func: fb.name.clone() });
                fb.current_block(line).ops.push(GpuOp { id, op, lazy });
            }
        }
    }

    if current.is_some() {
        return Err(TraceError::Syntax {
            line: last_line.max(1),
            col: 1,
            msg: "unterminated function (missing `end`)".into(),
        });
    }
    let Some(name) = name else {
        return Err(TraceError::Syntax { line: 1, col: 1, msg: "missing `program` header".into() });
    };

    let main = if functions.contains_key(&name) {
        name.clone()
    } else if functions.contains_key("main") {
        "main".to_string()
    } else {
        return Err(TraceError::Structure {
            function: name.clone(),
            msg: "no function named after the program (or `main`)".into(),
        });
    };

    for f in functions.values() {
        validate_function(f, &block_lines)?;
    }
    validate_calls(&functions, &op_sites)?;
    validate_symbols(&functions, &op_sites)?;

    Ok(Program { name, class, main, functions })
}

fn parse_op(kw: &str, col: usize, cur: &mut Cursor<'_>) -> Result<(Op, bool), TraceError> {
    let op = match kw {
        "malloc" => {
            let sym = cur.ident("symbol")?;
            let bytes = cur.number("byte count")?;
            if bytes == 0 {
                return Err(cur.err(col, "malloc of zero bytes"));
            }
            Op::Malloc { sym, bytes }
        }
        "memcpy_h2d" => Op::MemcpyH2D { sym: cur.ident("symbol")?, bytes: cur.number("byte count")? },
        "memcpy_d2h" => Op::MemcpyD2H { sym: cur.ident("symbol")?, bytes: cur.number("byte count")? },
        "memset" => Op::Memset { sym: cur.ident("symbol")?, bytes: cur.number("byte count")? },
        "free" => Op::Free { sym: cur.ident("symbol")? },
        "set_heap_limit" => {
            let op = Op::SetHeapLimit { bytes: cur.number("byte count")? };
            return Ok((op, false));
        }
        "call" => {
            let op = Op::Call { callee: cur.ident("function name")? };
            return Ok((op, false));
        }
        "launch" => return Ok((Op::Launch(parse_launch(cur)?), false)),
        other => return Err(cur.err(col, format!("unknown operation `{other}`"))),
    };
    let lazy = cur.lazy_flag()?;
    Ok((op, lazy))
}

fn parse_launch(cur: &mut Cursor<'_>) -> Result<LaunchOp, TraceError> {
    let kernel = cur.ident("kernel name")?;
    cur.keyword("grid")?;
    let grid = cur.dim3("grid dimension")?;
    cur.keyword("block")?;
    let block = cur.dim3("block dimension")?;
    let threads = block.product();
    if threads > MAX_THREADS_PER_BLOCK {
        return Err(TraceError::ThreadLimit { line: cur.line, threads });
    }
    let mut args = Vec::new();
    if matches!(cur.peek(), Some(t) if t.text == "args") {
        cur.pos += 1;
        let t = cur.next("argument list")?;
        for (i, a) in t.text.split(',').enumerate() {
            if !is_ident(a) {
                return Err(cur.err(t.col, format!("invalid argument #{} in `{}`", i + 1, t.text)));
            }
            args.push(a.to_string());
        }
    }
    cur.keyword("dur")?;
    let duration_us = parse_duration_us(cur)?;
    let mut regs_per_thread = 0;
    let mut smem_per_block = 0;
    while let Some(t) = cur.peek() {
        match t.text {
            "regs" => {
                cur.pos += 1;
                regs_per_thread = u32::try_from(cur.number("register count")?)
                    .map_err(|_| cur.err(t.col, "register count out of range"))?;
            }
            "smem" => {
                cur.pos += 1;
                smem_per_block = cur.number("shared memory bytes")?;
            }
            _ => break,
        }
    }
    Ok(LaunchOp { kernel, grid, block, args, duration_us, regs_per_thread, smem_per_block })
}

fn validate_function(
    f: &FunctionGraph,
    block_lines: &HashMap<(String, String), usize>,
) -> Result<(), TraceError> {
    for b in f.blocks.values() {
        for s in &b.succs {
            if !f.blocks.contains_key(s) {
                let line = block_lines.get(&(f.name.clone(), b.label.clone())).copied().unwrap_or(0);
                return Err(TraceError::UnresolvedLabel { line, label: s.clone() });
            }
        }
    }
    let exits: Vec<&str> =
        f.blocks.values().filter(|b| b.succs.is_empty()).map(|b| b.label.as_str()).collect();
    match exits.len() {
        1 => {}
        0 => {
            return Err(TraceError::Structure {
                function: f.name.clone(),
                msg: "no exit block (every block has successors)".into(),
            })
        }
        _ => {
            return Err(TraceError::Structure {
                function: f.name.clone(),
                msg: format!("multiple exit blocks: {}", exits.join(", ")),
            })
        }
    }
    let succs = f.successors();
    let reach = reachable(&succs, 0);
    if let Some(i) = reach.iter().position(|r| !r) {
        return Err(TraceError::Structure {
            function: f.name.clone(),
            msg: format!("block `{}` is unreachable from the entry", f.blocks[i].label),
        });
    }
    let back = reachable(&f.predecessors(), f.exit_index());
    if let Some(i) = back.iter().position(|r| !r) {
        return Err(TraceError::Structure {
            function: f.name.clone(),
            msg: format!("block `{}` cannot reach the exit", f.blocks[i].label),
        });
    }
    Ok(())
}

pub(crate) fn reachable(succs: &[Vec<usize>], root: usize) -> Vec<bool> {
    let mut seen = vec![false; succs.len()];
    let mut stack = vec![root];
    seen[root] = true;
    while let Some(n) = stack.pop() {
        for &s in &succs[n] {
            if !seen[s] {
                seen[s] = true;
                stack.push(s);
            }
        }
    }
    seen
}

fn validate_calls(
    functions: &IndexMap<String, FunctionGraph>,
    sites: &BTreeMap<OpId, OpSite>,
) -> Result<(), TraceError> {
    let mut graph: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for f in functions.values() {
        let callees = graph.entry(f.name.as_str()).or_default();
        for op in f.ops() {
            if let Op::Call { callee } = &op.op {
                if !functions.contains_key(callee) {
                    return Err(TraceError::UnresolvedFunction {
                        line: sites[&op.id].line,
                        name: callee.clone(),
                    });
                }
                callees.push(callee);
            }
        }
    }
    // Colored DFS for cycle detection.
    #[derive(Clone, Copy, PartialEq)]
    enum Color {
        White,
        Grey,
        Black,
    }
    let mut color: BTreeMap<&str, Color> = graph.keys().map(|k| (*k, Color::White)).collect();
    fn visit<'a>(
        n: &'a str,
        graph: &BTreeMap<&'a str, Vec<&'a str>>,
        color: &mut BTreeMap<&'a str, Color>,
        path: &mut Vec<&'a str>,
    ) -> Option<Vec<String>> {
        color.insert(n, Color::Grey);
        path.push(n);
        for &c in &graph[n] {
            match color[c] {
                Color::Grey => {
                    let start = path.iter().position(|p| *p == c).unwrap();
                    let mut cycle: Vec<String> = path[start..].iter().map(|s| s.to_string()).collect();
                    cycle.push(c.to_string());
                    return Some(cycle);
                }
                Color::White => {
                    if let Some(cy) = visit(c, graph, color, path) {
                        return Some(cy);
                    }
                }
                Color::Black => {}
            }
        }
        path.pop();
        color.insert(n, Color::Black);
        None
    }
    let names: Vec<&str> = graph.keys().copied().collect();
    for n in names {
        if color[n] == Color::White {
            if let Some(cycle) = visit(n, &graph, &mut color, &mut Vec::new()) {
                return Err(TraceError::RecursiveCall { cycle });
            }
        }
    }
    Ok(())
}

fn validate_symbols(
    functions: &IndexMap<String, FunctionGraph>,
    sites: &BTreeMap<OpId, OpSite>,
) -> Result<(), TraceError> {
    let declared: BTreeSet<&str> = functions
        .values()
        .flat_map(|f| f.ops())
        .filter_map(|o| match &o.op {
            Op::Malloc { sym, .. } => Some(sym.as_str()),
            _ => None,
        })
        .collect();
    for f in functions.values() {
        for op in f.ops() {
            if let Some(sym) = op.op.symbol() {
                if !declared.contains(sym) {
                    debug_assert_eq!(sites[&op.id].func, f.name);
                    return Err(TraceError::UnknownSymbol {
                        line: sites[&op.id].line,
                        symbol: sym.to_string(),
                    });
                }
            }
        }
    }
    Ok(())
}
