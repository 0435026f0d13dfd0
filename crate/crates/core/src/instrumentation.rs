//! Memory accounting by counting live KV slots and attention-matrix entries.

use std::io::Write;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::cache::PolicyConfig;
use crate::error::Result;
use crate::model::{evaluate, Checkpoint, EvalConfig};

/// One layer's state after one block. Counts are per layer-head: `live_entries`
/// is the number of cached slots and `attn_entries` the size of the score
/// matrix allocated for the block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockRecord {
    pub block: usize,
    pub layer: usize,
    pub live_entries: usize,
    pub attn_entries: usize,
    pub tokens_seen: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MemoryTrace {
    records: Vec<BlockRecord>,
}

impl MemoryTrace {
    pub fn record_block(
        &mut self,
        block: usize,
        layer: usize,
        live_entries: usize,
        attn_entries: usize,
        tokens_seen: usize,
    ) {
        self.records.push(BlockRecord {
            block,
            layer,
            live_entries,
            attn_entries,
            tokens_seen,
        });
    }

    pub fn records(&self) -> &[BlockRecord] {
        &self.records
    }

    pub fn n_blocks(&self) -> usize {
        self.records.last().map_or(0, |r| r.block + 1)
    }

    pub fn peak_live_entries(&self) -> usize {
        self.records.iter().map(|r| r.live_entries).max().unwrap_or(0)
    }

    pub fn peak_attn_entries(&self) -> usize {
        self.records.iter().map(|r| r.attn_entries).max().unwrap_or(0)
    }

    /// Appends another session's trace, renumbering its blocks after ours.
    pub fn merge(&mut self, other: &MemoryTrace) {
        let offset = self.n_blocks();
        self.records.extend(other.records.iter().map(|r| BlockRecord {
            block: r.block + offset,
            ..*r
        }));
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyReport {
    pub policy: String,
    /// JSON echo of the run configuration.
    pub config: String,
    pub perplexity: f64,
    pub peak_live_entries: usize,
    pub tokens_per_sec: f64,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
}

impl PolicyReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn write_csv<W: Write>(reports: &[PolicyReport], out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in reports {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(data: &[u8]) -> Result<Vec<PolicyReport>> {
        csv::Reader::from_reader(data)
            .deserialize()
            .map(|r| r.map_err(Into::into))
            .collect()
    }
}

/// Evaluates every policy on the same corpus and checkpoint.
pub fn compare_policies(
    ck: &Checkpoint,
    corpus: &[usize],
    policies: &[PolicyConfig],
    eval: &EvalConfig,
    config_echo: &str,
) -> Result<Vec<PolicyReport>> {
    policies
        .iter()
        .map(|p| {
            let started = Instant::now();
            let summary = evaluate(ck, corpus, p, eval)?;
            let secs = started.elapsed().as_secs_f64().max(1e-9);
            Ok(PolicyReport {
                policy: p.kind.to_string(),
                config: config_echo.to_string(),
                perplexity: summary.perplexity,
                peak_live_entries: summary.peak_live_entries,
                tokens_per_sec: summary.tokens as f64 / secs,
                timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn merge_renumbers_blocks() {
        let mut a = MemoryTrace::default();
        a.record_block(0, 0, 4, 16, 4);
        a.record_block(1, 0, 8, 32, 8);
        let mut b = MemoryTrace::default();
        b.record_block(0, 0, 4, 16, 4);
        a.merge(&b);
        assert_eq!(a.n_blocks(), 3);
        assert_eq!(a.records()[2].block, 2);
        assert_eq!(a.peak_live_entries(), 8);
        assert_eq!(a.peak_attn_entries(), 32);
    }

    #[test]
    fn csv_header_and_rows() {
        let mut t = MemoryTrace::default();
        t.record_block(0, 1, 2, 3, 4);
        assert_eq!(
            t.to_csv().unwrap(),
            "block,layer,live_entries,attn_entries,tokens_seen\n0,1,2,3,4\n"
        );
    }

    #[test]
    fn report_round_trips() {
        let r = PolicyReport {
            policy: "lococo+h2o".into(),
            config: r#"{"m":16,"b":"x,y"}"#.into(),
            perplexity: 1.2345678901234567,
            peak_live_entries: 16,
            tokens_per_sec: 1234.5678901234567,
            timestamp: 1_700_000_000,
        };
        assert_eq!(PolicyReport::from_json(&r.to_json().unwrap()).unwrap(), r);
        let mut buf = Vec::new();
        PolicyReport::write_csv(std::slice::from_ref(&r), &mut buf).unwrap();
        assert_eq!(PolicyReport::read_csv(&buf).unwrap(), vec![r]);
    }
}
