//! Parse, type, instrument, optimize and run a program in one go.

use crate::config::Config;
use crate::ir::{infer_malloc_types, instrument, interpret, optimize, parse_program, OptStats, ParseError, Program};
use crate::report::ExecReport;

/// A program ready to run, with what the optimizer removed.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub program: Program,
    pub opt: OptStats,
}

pub fn prepare(file: &str, src: &str, cfg: &Config) -> Result<Prepared, ParseError> {
    let mut program = parse_program(file, src)?;
    infer_malloc_types(&mut program);
    if !cfg.instrument {
        return Ok(Prepared { program, opt: OptStats::default() });
    }
    let mut program = instrument(&program, cfg.variant);
    let opt = optimize(&mut program, &cfg.optimize);
    Ok(Prepared { program, opt })
}

pub fn run(file: &str, src: &str, cfg: &Config) -> Result<(ExecReport, OptStats), ParseError> {
    let p = prepare(file, src, cfg)?;
    Ok((interpret(&p.program, &cfg.interp(), &cfg.variant_label()), p.opt))
}
