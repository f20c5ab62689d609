//! CSV schema: header row with observation columns `z1..zm`, optional
//! heterogeneity columns `sigma11..sigmaMM` (row-major covariance) or
//! `lambda1..lambdam`, optional latent columns `theta1..thetam`, and
//! denoised columns `d1..dm`. Values are written with 17 significant digits
//! so a round trip is lossless.

use super::CliError;
use crate::bures::SpdMatrix;

#[derive(Debug, Default)]
pub struct CsvTable {
    pub n: usize,
    pub m: usize,
    pub z: Vec<f64>,
    pub sigmas: Option<Vec<SpdMatrix>>,
    pub lambdas: Option<Vec<f64>>,
    pub thetas: Option<Vec<f64>>,
    pub denoised: Option<Vec<f64>>,
}

fn count_prefixed(headers: &[&str], prefix: &str) -> usize {
    (1..)
        .take_while(|i| headers.contains(&format!("{prefix}{i}").as_str()))
        .count()
}

pub fn read_table(path: &str) -> Result<CsvTable, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("cannot read {path}: {e}")))?;
    let mut lines = text.lines().enumerate();
    let Some((_, header)) = lines.next() else {
        return Err(CliError::Data(format!("{path} is empty")));
    };
    let headers: Vec<&str> = header.split(',').map(|h| h.trim()).collect();

    let m = count_prefixed(&headers, "z");
    let md = count_prefixed(&headers, "d");
    let mt = count_prefixed(&headers, "theta");
    let dim = m.max(md).max(mt);
    if dim == 0 {
        return Err(CliError::Data(format!(
            "{path} has none of the expected columns z1.., d1.., theta1.."
        )));
    }
    let n_lambda = count_prefixed(&headers, "lambda");
    let has_sigma = headers.contains(&"sigma11");
    if n_lambda > 0 && n_lambda != dim {
        return Err(CliError::Data(format!(
            "{path} has {n_lambda} lambda columns for dimension {dim}"
        )));
    }

    let col = |name: &str| headers.iter().position(|h| *h == name);
    let z_cols: Vec<usize> = (1..=m).filter_map(|i| col(&format!("z{i}"))).collect();
    let d_cols: Vec<usize> = (1..=md).filter_map(|i| col(&format!("d{i}"))).collect();
    let t_cols: Vec<usize> = (1..=mt).filter_map(|i| col(&format!("theta{i}"))).collect();
    let l_cols: Vec<usize> = (1..=n_lambda)
        .filter_map(|i| col(&format!("lambda{i}")))
        .collect();
    let mut s_cols = Vec::new();
    if has_sigma {
        for i in 1..=m {
            for j in 1..=m {
                match col(&format!("sigma{i}{j}")) {
                    Some(c) => s_cols.push(c),
                    None => {
                        return Err(CliError::Data(format!(
                            "{path} is missing column sigma{i}{j}"
                        )))
                    }
                }
            }
        }
    }

    let mut table = CsvTable {
        m: dim,
        ..Default::default()
    };
    let mut sigmas = Vec::new();
    let mut lambdas = Vec::new();
    let mut thetas = Vec::new();
    let mut denoised = Vec::new();

    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(|f| f.trim()).collect();
        if fields.len() != headers.len() {
            return Err(CliError::Data(format!(
                "{path}:{} has {} fields, expected {}",
                lineno + 1,
                fields.len(),
                headers.len()
            )));
        }
        let get = |c: usize| -> Result<f64, CliError> {
            fields[c].parse::<f64>().map_err(|_| {
                CliError::Data(format!(
                    "{path}:{}: cannot parse `{}` as a number",
                    lineno + 1,
                    fields[c]
                ))
            })
        };
        for &c in &z_cols {
            table.z.push(get(c)?);
        }
        for &c in &d_cols {
            denoised.push(get(c)?);
        }
        for &c in &t_cols {
            thetas.push(get(c)?);
        }
        for &c in &l_cols {
            lambdas.push(get(c)?);
        }
        if has_sigma {
            let mut flat = Vec::with_capacity(m * m);
            for &c in &s_cols {
                flat.push(get(c)?);
            }
            let spd = SpdMatrix::new(m, flat).map_err(|e| {
                CliError::Data(format!("{path}:{}: bad covariance: {e}", lineno + 1))
            })?;
            sigmas.push(spd);
        }
        table.n += 1;
    }
    if has_sigma {
        table.sigmas = Some(sigmas);
    }
    if !lambdas.is_empty() {
        table.lambdas = Some(lambdas);
    }
    if !thetas.is_empty() {
        table.thetas = Some(thetas);
    }
    if !denoised.is_empty() {
        table.denoised = Some(denoised);
    }
    Ok(table)
}

/// 17 significant digits: enough to reconstruct any f64 exactly.
pub fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

pub struct CsvWriter {
    out: String,
    columns: usize,
}

impl CsvWriter {
    pub fn new(header: &[String]) -> Self {
        CsvWriter {
            out: format!("{}\n", header.join(",")),
            columns: header.len(),
        }
    }

    pub fn row(&mut self, fields: &[String]) {
        assert_eq!(fields.len(), self.columns);
        self.out.push_str(&fields.join(","));
        self.out.push('\n');
    }

    pub fn write(self, path: &str) -> Result<(), CliError> {
        std::fs::write(path, self.out).map_err(|e| CliError::Data(format!("cannot write {path}: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_round_trip() {
        for v in [0.1, -3.5e-17, 1.0 / 3.0, 12345.6789, f64::MIN_POSITIVE] {
            let s = fmt_float(v);
            assert_eq!(s.parse::<f64>().unwrap(), v, "{s}");
        }
    }

    #[test]
    fn read_write_round_trip() {
        let dir = std::env::temp_dir().join("otdenoise_csv_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.csv");
        let path = path.to_str().unwrap();
        let mut w = CsvWriter::new(&["z1".into(), "z2".into(), "theta1".into(), "theta2".into()]);
        w.row(&[
            fmt_float(0.25),
            fmt_float(-1.5),
            fmt_float(1.0 / 3.0),
            fmt_float(2.0),
        ]);
        w.write(path).unwrap();
        let t = read_table(path).unwrap();
        assert_eq!(t.n, 1);
        assert_eq!(t.m, 2);
        assert_eq!(t.z, vec![0.25, -1.5]);
        assert_eq!(t.thetas.unwrap(), vec![1.0 / 3.0, 2.0]);
    }

    #[test]
    fn bad_field_is_data_error() {
        let dir = std::env::temp_dir().join("otdenoise_csv_test2");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.csv");
        std::fs::write(&path, "z1\nnot_a_number\n").unwrap();
        match read_table(path.to_str().unwrap()) {
            Err(CliError::Data(msg)) => assert!(msg.contains("cannot parse")),
            other => panic!("expected data error, got {other:?}"),
        }
    }
}
