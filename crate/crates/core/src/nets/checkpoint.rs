//! Text checkpoint of a [`ModelParams`].
//!
//! ```text
//! scout-checkpoint 1
//! arch <architecture as one-line JSON>
//! counters <steps_since_sync> <sync_interval>
//! net <name> <activation> <dropout bits> <layer count>
//! dense <fan_in> <fan_out>
//! <fan_in * fan_out weight bits, space separated>
//! <fan_out bias bits, space separated>
//! ...
//! ```
//!
//! Every real is written as the 16-digit hex of its IEEE-754 bits, so a
//! save/load round trip is exact. Nets appear in the order encoder,
//! transition, reward, discount, q, encoder_target, q_target.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::autodiff::{Activation, Tensor};

use super::{Architecture, Dense, Mlp, ModelParams, NetError};

const MAGIC: &str = "scout-checkpoint 1";

fn hex(v: f64) -> String {
    format!("{:016x}", v.to_bits())
}

fn unhex(s: &str) -> Result<f64, NetError> {
    u64::from_str_radix(s, 16)
        .map(f64::from_bits)
        .map_err(|_| NetError::Checkpoint(format!("bad value {s:?}")))
}

fn activation_name(a: Activation) -> &'static str {
    match a {
        Activation::Tanh => "tanh",
        Activation::Relu => "relu",
        Activation::Identity => "identity",
    }
}

fn write_net<W: Write>(w: &mut W, net: &Mlp) -> std::io::Result<()> {
    writeln!(
        w,
        "net {} {} {} {}",
        net.name,
        activation_name(net.hidden),
        hex(net.dropout),
        net.layers.len()
    )?;
    for layer in &net.layers {
        writeln!(w, "dense {} {}", layer.fan_in(), layer.fan_out())?;
        for t in [&layer.weight, &layer.bias] {
            let line: Vec<String> = t.data().iter().map(|&v| hex(v)).collect();
            writeln!(w, "{}", line.join(" "))?;
        }
    }
    Ok(())
}

pub fn write_checkpoint<W: Write>(w: W, params: &ModelParams) -> Result<(), NetError> {
    let mut w = BufWriter::new(w);
    writeln!(w, "{MAGIC}")?;
    let arch = serde_json::to_string(&params.arch)
        .map_err(|e| NetError::Checkpoint(e.to_string()))?;
    writeln!(w, "arch {arch}")?;
    writeln!(w, "counters {} {}", params.steps_since_sync, params.sync_interval)?;
    for net in [
        &params.encoder,
        &params.transition,
        &params.reward,
        &params.discount,
        &params.q,
        &params.encoder_target,
        &params.q_target,
    ] {
        write_net(&mut w, net)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_checkpoint(path: &Path, params: &ModelParams) -> Result<(), NetError> {
    write_checkpoint(std::fs::File::create(path)?, params)
}

struct Lines<R: BufRead> {
    inner: std::io::Lines<R>,
    line_no: usize,
}

impl<R: BufRead> Lines<R> {
    fn next(&mut self) -> Result<String, NetError> {
        self.line_no += 1;
        match self.inner.next() {
            Some(line) => Ok(line?),
            None => Err(NetError::Checkpoint(format!(
                "unexpected end of file at line {}",
                self.line_no
            ))),
        }
    }

    fn fail(&self, msg: &str) -> NetError {
        NetError::Checkpoint(format!("line {}: {msg}", self.line_no))
    }
}

fn read_values<R: BufRead>(lines: &mut Lines<R>, n: usize) -> Result<Vec<f64>, NetError> {
    let line = lines.next()?;
    let values = line
        .split_ascii_whitespace()
        .map(unhex)
        .collect::<Result<Vec<_>, _>>()?;
    if values.len() != n {
        return Err(lines.fail(&format!("expected {n} values, found {}", values.len())));
    }
    Ok(values)
}

fn read_net<R: BufRead>(lines: &mut Lines<R>, expected_name: &str) -> Result<Mlp, NetError> {
    let header = lines.next()?;
    let parts: Vec<&str> = header.split_ascii_whitespace().collect();
    if parts.len() != 5 || parts[0] != "net" {
        return Err(lines.fail("expected net header"));
    }
    let name = parts[1];
    if name != expected_name {
        return Err(lines.fail(&format!("expected net {expected_name}, found {name}")));
    }
    let hidden = match parts[2] {
        "tanh" => Activation::Tanh,
        "relu" => Activation::Relu,
        "identity" => Activation::Identity,
        other => return Err(lines.fail(&format!("unknown activation {other}"))),
    };
    let dropout = unhex(parts[3])?;
    let n_layers: usize = parts[4].parse().map_err(|_| lines.fail("bad layer count"))?;
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let dense = lines.next()?;
        let dims: Vec<usize> = dense
            .split_ascii_whitespace()
            .skip(1)
            .map(|s| s.parse().map_err(|_| lines.fail("bad layer dims")))
            .collect::<Result<_, _>>()?;
        if !dense.starts_with("dense ") || dims.len() != 2 {
            return Err(lines.fail("expected dense header"));
        }
        let (fan_in, fan_out) = (dims[0], dims[1]);
        let w = read_values(lines, fan_in * fan_out)?;
        let b = read_values(lines, fan_out)?;
        layers.push(Dense {
            weight: Tensor::matrix(fan_in, fan_out, w).map_err(|e| lines.fail(&e.to_string()))?,
            bias: Tensor::new(vec![fan_out], b).map_err(|e| lines.fail(&e.to_string()))?,
        });
    }
    Ok(Mlp {
        name: name.to_string(),
        layers,
        hidden,
        dropout,
    })
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<ModelParams, NetError> {
    let mut lines = Lines {
        inner: BufReader::new(r).lines(),
        line_no: 0,
    };
    if lines.next()? != MAGIC {
        return Err(lines.fail("not a scout checkpoint"));
    }
    let arch_line = lines.next()?;
    let arch: Architecture = arch_line
        .strip_prefix("arch ")
        .ok_or_else(|| lines.fail("expected arch"))
        .and_then(|s| serde_json::from_str(s).map_err(|e| lines.fail(&e.to_string())))?;
    let counters = lines.next()?;
    let c: Vec<u64> = counters
        .strip_prefix("counters ")
        .ok_or_else(|| lines.fail("expected counters"))?
        .split_ascii_whitespace()
        .map(|s| s.parse().map_err(|_| lines.fail("bad counter")))
        .collect::<Result<_, _>>()?;
    if c.len() != 2 {
        return Err(lines.fail("expected two counters"));
    }
    let encoder = read_net(&mut lines, "encoder")?;
    let transition = read_net(&mut lines, "transition")?;
    let reward = read_net(&mut lines, "reward")?;
    let discount = read_net(&mut lines, "discount")?;
    let q = read_net(&mut lines, "q")?;
    let encoder_target = read_net(&mut lines, "encoder")?;
    let q_target = read_net(&mut lines, "q")?;
    Ok(ModelParams {
        arch,
        encoder,
        transition,
        reward,
        discount,
        q,
        encoder_target,
        q_target,
        steps_since_sync: c[0],
        sync_interval: c[1],
    })
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams, NetError> {
    read_checkpoint(std::fs::File::open(path)?)
}
