use std::fmt;

use super::{FunctionGraph, GpuOp, Op, Program};

fn write_ms(f: &mut fmt::Formatter<'_>, us: u64) -> fmt::Result {
    write!(f, "{}.{:03}", us / 1000, us % 1000)
}

impl fmt::Display for GpuOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.op {
            Op::Malloc { sym, bytes } => write!(f, "malloc {sym} {bytes}")?,
            Op::MemcpyH2D { sym, bytes } => write!(f, "memcpy_h2d {sym} {bytes}")?,
            Op::MemcpyD2H { sym, bytes } => write!(f, "memcpy_d2h {sym} {bytes}")?,
            Op::Memset { sym, bytes } => write!(f, "memset {sym} {bytes}")?,
            Op::Free { sym } => write!(f, "free {sym}")?,
            Op::SetHeapLimit { bytes } => return write!(f, "set_heap_limit {bytes}"),
            Op::Call { callee } => return write!(f, "call {callee}"),
            Op::Launch(l) => {
                write!(f, "launch {} grid {} block {}", l.kernel, l.grid, l.block)?;
                if !l.args.is_empty() {
                    write!(f, " args {}", l.args.join(","))?;
                }
                f.write_str(" dur ")?;
                write_ms(f, l.duration_us)?;
                if l.regs_per_thread > 0 {
                    write!(f, " regs {}", l.regs_per_thread)?;
                }
                if l.smem_per_block > 0 {
                    write!(f, " smem {}", l.smem_per_block)?;
                }
                return Ok(());
            }
        }
        if self.lazy {
            f.write_str(" lazy")?;
        }
        Ok(())
    }
}

impl fmt::Display for FunctionGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "func {}", self.name)?;
        for b in self.blocks.values() {
            write!(f, "block {}", b.label)?;
            if !b.succs.is_empty() {
                write!(f, " succ {}", b.succs.join(" "))?;
            }
            if let Some(p) = b.taken_prob {
                write!(f, " prob {p}")?;
            }
            writeln!(f)?;
            for op in &b.ops {
                writeln!(f, "  {op}")?;
            }
        }
        writeln!(f, "end")
    }
}

impl fmt::Display for Program {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "program {}", self.name)?;
        if let Some(c) = self.class {
            writeln!(f, "class {c}")?;
        }
        for func in self.functions.values() {
            write!(f, "{func}")?;
        }
        Ok(())
    }
}
