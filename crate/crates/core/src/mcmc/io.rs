//! Chain files: one CSV per chain with columns `iteration`, the saved
//! parameters in [`super::param_names`] order, and `deviance`.

use crate::error::{Error, Result};

use super::ChainSamples;

/// A chain read back from CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainTable {
    pub names: Vec<String>,
    /// Post-burn-in iteration number of each row.
    pub iterations: Vec<u64>,
    /// One column per name.
    pub draws: Vec<Vec<f64>>,
    pub deviance: Vec<f64>,
}

impl ChainTable {
    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.draws[i].as_slice())
    }

    pub fn len(&self) -> usize {
        self.iterations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.iterations.is_empty()
    }
}

/// Serializes a chain. Values use the shortest representation that parses
/// back to the same `f64`.
pub fn write_chain_csv(chain: &ChainSamples, thin: usize) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["iteration".to_string()];
    header.extend(chain.names.iter().cloned());
    header.push("deviance".into());
    w.write_record(&header)?;
    let mut row = Vec::with_capacity(header.len());
    for k in 0..chain.len() {
        row.clear();
        row.push(((k + 1) * thin).to_string());
        row.extend(chain.draws.iter().map(|c| c[k].to_string()));
        row.push(chain.deviance[k].to_string());
        w.write_record(&row)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn read_chain_csv(text: &str) -> Result<ChainTable> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header.len() < 2 || header[0] != "iteration" || header[header.len() - 1] != "deviance" {
        return Err(Error::Parse {
            line: 1,
            message: "chain header must start with 'iteration' and end with 'deviance'".into(),
        });
    }
    let names = header[1..header.len() - 1].to_vec();
    let mut table = ChainTable {
        draws: vec![Vec::new(); names.len()],
        names,
        iterations: Vec::new(),
        deviance: Vec::new(),
    };
    for (k, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = k as u64 + 2;
        if rec.len() != header.len() {
            return Err(Error::Parse {
                line,
                message: format!("expected {} fields, got {}", header.len(), rec.len()),
            });
        }
        let iteration = rec[0].trim().parse().map_err(|_| Error::Parse {
            line,
            message: format!("bad iteration '{}'", &rec[0]),
        })?;
        table.iterations.push(iteration);
        for (j, field) in rec.iter().enumerate().skip(1) {
            let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
                line,
                message: format!("bad value '{field}' in column '{}'", header[j]),
            })?;
            if j == header.len() - 1 {
                table.deviance.push(v);
            } else {
                table.draws[j - 1].push(v);
            }
        }
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use indexmap::IndexMap;

    fn chain() -> ChainSamples {
        ChainSamples {
            chain_index: 0,
            seed: 1,
            names: vec!["lambda[SG]".into(), "d[m1]".into()],
            draws: vec![vec![1.0 / 3.0, 2.5e-300], vec![-0.1, 7.0]],
            deviance: vec![12.25, 13.0],
            mean_fitted: vec![],
            acceptance: IndexMap::new(),
            scales_after_burnin: vec![],
            scales_final: vec![],
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let c = chain();
        let text = write_chain_csv(&c, 5).unwrap();
        assert!(text.starts_with("iteration,lambda[SG],d[m1],deviance\n5,"));
        let t = read_chain_csv(&text).unwrap();
        assert_eq!(t.iterations, vec![5, 10]);
        assert_eq!(t.names, c.names);
        assert_eq!(t.draws, c.draws);
        assert_eq!(t.deviance, c.deviance);
        assert_eq!(t.column("d[m1]"), Some(&[-0.1, 7.0][..]));
    }

    #[test]
    fn rejects_bad_header_and_values() {
        assert!(read_chain_csv("iter,x,deviance\n1,2,3\n").is_err());
        let err = read_chain_csv("iteration,x,deviance\n1,abc,3\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }
}
