//! Closed-form per-round communication, memory and compute accounting.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    FsLora,
    FedLora,
    HeteroLora,
    FlexLora,
    Flora,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::FsLora,
        Method::FedLora,
        Method::HeteroLora,
        Method::FlexLora,
        Method::Flora,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::FsLora => "fslora",
            Method::FedLora => "fedlora",
            Method::HeteroLora => "heterolora",
            Method::FlexLora => "flexlora",
            Method::Flora => "flora",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Argument(format!("unknown method '{s}'")))
    }
}

pub const BYTES_PER_PARAM: u64 = 4;

/// Shape and budget inputs for one round. `ks` lists the active ranks of
/// the round's participants, so `ks.len()` is N.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostParams {
    pub m: usize,
    pub n: usize,
    pub r: usize,
    pub ks: Vec<usize>,
    pub local_steps: usize,
}

impl CostParams {
    pub fn new(m: usize, n: usize, r: usize, ks: Vec<usize>, local_steps: usize) -> Result<Self> {
        if m == 0 || n == 0 || r == 0 {
            return Err(Error::Argument("m, n and r must be positive".into()));
        }
        if let Some(k) = ks.iter().find(|k| **k == 0 || **k > r) {
            return Err(Error::Range(format!("rank {k} outside [1, {r}]")));
        }
        Ok(Self { m, n, r, ks, local_steps })
    }

    pub fn clients(&self) -> usize {
        self.ks.len()
    }

    /// Bytes of one rank-`r` adapter pair.
    pub fn q(&self) -> u64 {
        BYTES_PER_PARAM * (self.r * (self.m + self.n)) as u64
    }

    /// Bytes of the full base weight.
    pub fn p(&self) -> u64 {
        BYTES_PER_PARAM * (self.m * self.n) as u64
    }

    /// `(k/r)·q`, computed in integers.
    pub fn partial_q(&self, k: usize) -> u64 {
        BYTES_PER_PARAM * (k * (self.m + self.n)) as u64
    }

    fn k(&self, i: usize) -> Result<usize> {
        self.ks
            .get(i)
            .copied()
            .ok_or_else(|| Error::Argument(format!("client index {i} out of range ({} clients)", self.ks.len())))
    }
}

/// `⌈ratio × len⌉`, robust to `ratio × len` landing a hair above an integer.
pub fn topk_keep_count(len: usize, ratio: f64) -> usize {
    let x = ratio * len as f64;
    let nearest = x.round();
    let keep = if (x - nearest).abs() <= 1e-9 * x.max(1.0) {
        nearest
    } else {
        x.ceil()
    };
    (keep as usize).min(len)
}

pub fn check_topk_ratio(ratio: f64) -> Result<()> {
    if ratio > 0.0 && ratio <= 1.0 {
        Ok(())
    } else {
        Err(Error::Range(format!("top-k ratio {ratio} outside (0, 1]")))
    }
}

/// Uplink bytes of client `i`. `topk` is only meaningful for FSLoRA.
pub fn uplink_bytes(params: &CostParams, method: Method, i: usize, topk: Option<f64>) -> Result<u64> {
    let k = params.k(i)?;
    match (method, topk) {
        (Method::FedLora, None) => Ok(params.q()),
        (Method::FsLora | Method::HeteroLora | Method::FlexLora | Method::Flora, None) => Ok(params.partial_q(k)),
        (Method::FsLora, Some(ratio)) => {
            check_topk_ratio(ratio)?;
            let payload = k * (params.m + params.n);
            let kept = topk_keep_count(payload, ratio) as u64;
            Ok(BYTES_PER_PARAM * kept + payload.div_ceil(8) as u64)
        }
        (other, Some(_)) => Err(Error::Argument(format!("top-k compression is not defined for {other}"))),
    }
}

/// Downlink bytes for the whole round (broadcast to the participants).
pub fn downlink_bytes(params: &CostParams, method: Method) -> u64 {
    match method {
        Method::FedLora | Method::HeteroLora | Method::FlexLora => params.q(),
        Method::Flora => params.ks.iter().map(|&k| params.partial_q(k)).sum(),
        Method::FsLora => params.q() + (params.clients() * params.r.div_ceil(8)) as u64,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientCost {
    pub memory_bytes: u64,
    pub flops: u64,
}

pub fn client_costs(params: &CostParams, method: Method, i: usize) -> Result<ClientCost> {
    let k = params.k(i)?;
    let (m, n, h) = (params.m as u64, params.n as u64, params.local_steps as u64);
    let update = |rank: usize| h * rank as u64 * (m + n);
    Ok(match method {
        Method::FedLora => ClientCost {
            memory_bytes: params.p() + params.q(),
            flops: update(params.r),
        },
        Method::FsLora | Method::HeteroLora | Method::FlexLora => ClientCost {
            memory_bytes: params.p() + params.partial_q(k),
            flops: update(k),
        },
        Method::Flora => {
            let stacked: u64 = params.ks.iter().map(|&k| params.partial_q(k)).sum();
            let total_k: u64 = params.ks.iter().map(|&k| k as u64).sum();
            ClientCost {
                memory_bytes: params.p() + stacked.max(params.p()),
                flops: update(k) + total_k * m * n + m * n,
            }
        }
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServerCost {
    pub memory_bytes: u64,
    pub flops: u64,
}

/// Server-side load per round (aggregation only).
pub fn server_costs(params: &CostParams, method: Method) -> ServerCost {
    let (m, n, r) = (params.m as u64, params.n as u64, params.r as u64);
    let big_n = params.clients() as u64;
    let total_k: u64 = params.ks.iter().map(|&k| k as u64).sum();
    let uploads: u64 = params.ks.iter().map(|&k| params.partial_q(k)).sum();
    match method {
        Method::FedLora => ServerCost {
            memory_bytes: params.q() + big_n * params.q(),
            flops: big_n * r * (m + n),
        },
        Method::FsLora | Method::HeteroLora => ServerCost {
            memory_bytes: params.q() + uploads,
            flops: total_k * (m + n),
        },
        Method::FlexLora => ServerCost {
            memory_bytes: params.p() + uploads,
            flops: total_k * m * n + m * n * m.min(n),
        },
        Method::Flora => ServerCost {
            memory_bytes: uploads,
            flops: total_k * (m + n),
        },
    }
}
