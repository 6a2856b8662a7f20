//! On-disk container for trained posteriors: `manifest.json` plus flat
//! little-endian f64 arrays. Ensemble members live in `member_<i>/`.

use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{config_bail, Error, Result};
use crate::model::{Layout, MlpSpec, ParameterVector};

use super::{
    Approximation, EnsembleState, GaussianMeanField, LaplaceState, PointEstimate, Posterior,
    Rank1State, SampleSet, SvgdState, SwagState,
};

const FORMAT: &str = "bayesbench-posterior-v1";
const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArrayRef {
    file: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    algorithm: String,
    spec: MlpSpec,
    layout: Layout,
    arrays: BTreeMap<String, ArrayRef>,
    #[serde(default)]
    meta: Value,
    #[serde(default)]
    members: Vec<String>,
    /// Caller-supplied context such as the training config and seed.
    #[serde(default)]
    extra: Value,
}

struct Writer<'a> {
    dir: &'a Path,
    arrays: BTreeMap<String, ArrayRef>,
}

impl Writer<'_> {
    fn put(&mut self, name: &str, rows: usize, cols: usize, data: &[f64]) -> Result<()> {
        debug_assert_eq!(rows * cols, data.len());
        let file = format!("{name}.f64");
        let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
        let path = self.dir.join(&file);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.arrays
            .insert(name.into(), ArrayRef { file, rows, cols });
        Ok(())
    }
}

fn read_array(dir: &Path, m: &Manifest, name: &str) -> Result<(usize, usize, Vec<f64>)> {
    let Some(a) = m.arrays.get(name) else {
        return Err(Error::Input(format!("manifest lacks array {name}")));
    };
    let path = dir.join(&a.file);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if bytes.len() != 8 * a.rows * a.cols {
        return Err(Error::Input(format!(
            "{} holds {} bytes, expected {}",
            path.display(),
            bytes.len(),
            8 * a.rows * a.cols
        )));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok((a.rows, a.cols, data))
}

fn meta_f64(m: &Manifest, key: &str) -> Result<f64> {
    m.meta
        .get(key)
        .and_then(Value::as_f64)
        .ok_or_else(|| Error::Input(format!("manifest meta lacks {key}")))
}

fn meta_usize(m: &Manifest, key: &str) -> Result<usize> {
    m.meta
        .get(key)
        .and_then(Value::as_u64)
        .map(|v| v as usize)
        .ok_or_else(|| Error::Input(format!("manifest meta lacks {key}")))
}

/// Writes `post` into `dir`, creating it if needed.
pub fn save_posterior(post: &Posterior, dir: &Path, extra: &Value) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let layout = post.spec.layout();
    let p = layout.total;
    let mut w = Writer {
        dir,
        arrays: BTreeMap::new(),
    };
    let mut members = Vec::new();
    let meta = match &post.approx {
        Approximation::Map(s) | Approximation::Mcd(s) => {
            w.put("params", 1, p, &s.params.values)?;
            Value::Null
        }
        Approximation::Bbb(q) | Approximation::Ivon(q) => {
            w.put("mu", 1, p, &q.mu.values)?;
            w.put("rho", 1, p, &q.rho.values)?;
            Value::Null
        }
        Approximation::Rank1(r) => {
            w.put("base", 1, p, &r.base.values)?;
            w.put(
                "factor_mu",
                r.components,
                r.factor_mu.len() / r.components,
                &r.factor_mu,
            )?;
            w.put(
                "factor_rho",
                r.components,
                r.factor_rho.len() / r.components,
                &r.factor_rho,
            )?;
            json!({ "components": r.components })
        }
        Approximation::Swag(s) => {
            w.put("mean", 1, p, &s.mean.values)?;
            w.put("sq_mean", 1, p, &s.sq_mean.values)?;
            let dev: Vec<f64> = s.deviations.iter().flatten().copied().collect();
            w.put("deviations", s.deviations.len(), p, &dev)?;
            json!({ "rank_k": s.rank_k, "snapshots_taken": s.snapshots_taken })
        }
        Approximation::Laplace(l) => {
            w.put("map_params", 1, p, &l.map_params.values)?;
            w.put("curvature", 1, l.curvature.len(), &l.curvature)?;
            json!({ "prior_precision": l.prior_precision })
        }
        Approximation::Svgd(s) => {
            let flat: Vec<f64> = s
                .particles
                .iter()
                .flat_map(|q| q.values.iter().copied())
                .collect();
            w.put("particles", s.particles.len(), p, &flat)?;
            json!({ "bandwidth": serde_json::to_value(s.bandwidth)? })
        }
        Approximation::Hmc(s) => {
            let flat: Vec<f64> = s
                .samples
                .iter()
                .flat_map(|q| q.values.iter().copied())
                .collect();
            w.put("samples", s.samples.len(), p, &flat)?;
            json!({ "diagnostics": serde_json::to_value(&s.diagnostics)? })
        }
        Approximation::Ensemble(e) => {
            for (i, m) in e.members.iter().enumerate() {
                let name = format!("member_{i}");
                save_posterior(m, &dir.join(&name), &Value::Null)?;
                members.push(name);
            }
            json!({ "member_seeds": e.member_seeds })
        }
    };
    let manifest = Manifest {
        format: FORMAT.into(),
        algorithm: post.approx.name().into(),
        spec: post.spec.clone(),
        layout,
        arrays: w.arrays,
        meta,
        members,
        extra: extra.clone(),
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Reads a posterior written by [`save_posterior`].
pub fn load_posterior(dir: &Path) -> Result<Posterior> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text)?;
    if m.format != FORMAT {
        return Err(Error::Input(format!(
            "unknown posterior format {}",
            m.format
        )));
    }
    m.spec.validate()?;
    if m.layout != m.spec.layout() {
        return Err(Error::Input(
            "manifest layout does not match its spec".into(),
        ));
    }
    let layout = Arc::new(m.layout.clone());
    let vector = |name: &str| -> Result<ParameterVector> {
        let (_, _, v) = read_array(dir, &m, name)?;
        ParameterVector::from_values(Arc::clone(&layout), v)
    };
    let rows_of = |name: &str| -> Result<Vec<ParameterVector>> {
        let (rows, cols, v) = read_array(dir, &m, name)?;
        if rows > 0 && cols != layout.total {
            return Err(Error::Input(format!("{name} rows have the wrong width")));
        }
        v.chunks(cols.max(1))
            .take(rows)
            .map(|c| ParameterVector::from_values(Arc::clone(&layout), c.to_vec()))
            .collect()
    };
    let approx = match m.algorithm.as_str() {
        "map" => Approximation::Map(PointEstimate::map(vector("params")?)),
        "mcd" => Approximation::Mcd(PointEstimate::dropout(vector("params")?)),
        "bbb" | "ivon" => {
            let q = GaussianMeanField {
                mu: vector("mu")?,
                rho: vector("rho")?,
            };
            if m.algorithm == "bbb" {
                Approximation::Bbb(q)
            } else {
                Approximation::Ivon(q)
            }
        }
        "rank1" => {
            let (_, _, fm) = read_array(dir, &m, "factor_mu")?;
            let (_, _, fr) = read_array(dir, &m, "factor_rho")?;
            Approximation::Rank1(Rank1State::from_parts(
                vector("base")?,
                fm,
                fr,
                meta_usize(&m, "components")?,
            )?)
        }
        "swag" => Approximation::Swag(SwagState {
            mean: vector("mean")?,
            sq_mean: vector("sq_mean")?,
            deviations: rows_of("deviations")?
                .into_iter()
                .map(|p| p.values)
                .collect::<VecDeque<_>>(),
            rank_k: meta_usize(&m, "rank_k")?,
            snapshots_taken: meta_usize(&m, "snapshots_taken")?,
        }),
        "laplace" => {
            let (_, _, c) = read_array(dir, &m, "curvature")?;
            Approximation::Laplace(LaplaceState {
                map_params: vector("map_params")?,
                curvature: c,
                prior_precision: meta_f64(&m, "prior_precision")?,
            })
        }
        "svgd" => Approximation::Svgd(SvgdState {
            particles: rows_of("particles")?,
            bandwidth: serde_json::from_value(
                m.meta.get("bandwidth").cloned().unwrap_or(Value::Null),
            )?,
        }),
        "hmc" => Approximation::Hmc(SampleSet {
            samples: rows_of("samples")?,
            diagnostics: serde_json::from_value(
                m.meta.get("diagnostics").cloned().unwrap_or(Value::Null),
            )?,
        }),
        "multi" => {
            let members = m
                .members
                .iter()
                .map(|name| load_posterior(&dir.join(name)))
                .collect::<Result<Vec<_>>>()?;
            let member_seeds =
                serde_json::from_value(m.meta.get("member_seeds").cloned().unwrap_or(Value::Null))?;
            Approximation::Ensemble(EnsembleState {
                members,
                member_seeds,
            })
        }
        other => config_bail!("unknown algorithm {other} in manifest"),
    };
    Ok(Posterior::new(m.spec, approx))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, Head};

    #[test]
    fn round_trips_preserve_every_bit() {
        let dir = tempfile::tempdir().unwrap();
        let spec = MlpSpec::new(vec![2, 3, 2], Head::Categorical);
        let p = init_params(&spec, 1);
        let mut rho = p.with_values(vec![-3.0; p.len()]);
        rho.values[0] = f64::NEG_INFINITY;
        let mut swag = SwagState::new(&p, 2).unwrap();
        swag.observe(&p.values);
        swag.observe(&init_params(&spec, 2).values);
        let cases = vec![
            Approximation::Map(PointEstimate::map(p.clone())),
            Approximation::Bbb(GaussianMeanField { mu: p.clone(), rho }),
            Approximation::Rank1(Rank1State::identity(p.clone(), 3, -2.0).unwrap()),
            Approximation::Swag(swag),
            Approximation::Laplace(LaplaceState {
                map_params: p.clone(),
                curvature: vec![0.5; 8],
                prior_precision: 2.0,
            }),
            Approximation::Svgd(SvgdState {
                particles: vec![p.clone(), init_params(&spec, 5)],
                bandwidth: super::super::Bandwidth::Fixed(0.7),
            }),
        ];
        for (i, a) in cases.into_iter().enumerate() {
            let post = Posterior::new(spec.clone(), a);
            let d = dir.path().join(format!("c{i}"));
            save_posterior(&post, &d, &json!({"seed": 1})).unwrap();
            assert_eq!(load_posterior(&d).unwrap(), post);
        }
        let ens = Posterior::new(
            spec.clone(),
            Approximation::Ensemble(EnsembleState {
                members: vec![
                    Posterior::new(
                        spec.clone(),
                        Approximation::Map(PointEstimate::map(p.clone())),
                    ),
                    Posterior::new(
                        spec.clone(),
                        Approximation::Map(PointEstimate::map(init_params(&spec, 9))),
                    ),
                ],
                member_seeds: vec![0, 1],
            }),
        );
        save_posterior(&ens, &dir.path().join("ens"), &Value::Null).unwrap();
        assert_eq!(load_posterior(&dir.path().join("ens")).unwrap(), ens);
    }

    #[test]
    fn truncated_arrays_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let spec = MlpSpec::new(vec![2, 2], Head::Categorical);
        let post = Posterior::new(
            spec.clone(),
            Approximation::Map(PointEstimate::map(init_params(&spec, 0))),
        );
        save_posterior(&post, dir.path(), &Value::Null).unwrap();
        fs::write(dir.path().join("params.f64"), [0u8; 7]).unwrap();
        assert!(load_posterior(dir.path()).is_err());
    }
}
