//! Plain-text POMDP description.
//!
//! ```text
//! # comments and blank lines are ignored
//! <states> <actions> <observations>
//! <initial belief, one row>
//! <T_0 rows> ... <T_{A-1} rows>     each states × states
//! <O_0 rows> ... <O_{A-1} rows>     each states × observations
//! <R rows>                          states × actions
//! ```

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};

use super::pomdp::Pomdp;
use crate::{Error, Result};

pub fn parse_pomdp_spec(text: &str) -> Result<Pomdp> {
    let mut rows = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty());
    let mut next_row = |want: usize, what: &str| -> Result<Vec<f64>> {
        let (lineno, line) = rows
            .next()
            .ok_or_else(|| Error::Format(format!("spec ends before {what}")))?;
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Format(format!("line {lineno}: expected numbers in {what}")))?;
        if vals.len() != want {
            return Err(Error::Format(format!(
                "line {lineno}: {what} has {} values, expected {want}",
                vals.len()
            )));
        }
        Ok(vals)
    };
    let dims = next_row(3, "dimensions")?;
    if dims.iter().any(|&d| d < 1.0 || d.fract() != 0.0) {
        return Err(Error::Format("dimensions must be positive integers".into()));
    }
    let (s, a, o) = (dims[0] as usize, dims[1] as usize, dims[2] as usize);
    let initial = DVector::from_vec(next_row(s, "initial belief")?);
    let mut table = |r: usize, c: usize, what: &str| -> Result<DMatrix<f64>> {
        let mut m = DMatrix::zeros(r, c);
        for i in 0..r {
            let row = next_row(c, what)?;
            m.row_mut(i).copy_from_slice(&row);
        }
        Ok(m)
    };
    let transition = (0..a)
        .map(|k| table(s, s, &format!("transition table {k}")))
        .collect::<Result<Vec<_>>>()?;
    let emission = (0..a)
        .map(|k| table(s, o, &format!("emission table {k}")))
        .collect::<Result<Vec<_>>>()?;
    let reward = table(s, a, "reward table")?;
    if let Some((lineno, _)) = rows.next() {
        return Err(Error::Format(format!("line {lineno}: trailing data")));
    }
    Pomdp::new(transition, emission, initial, reward)
}

pub fn format_pomdp_spec(p: &Pomdp) -> String {
    let mut out = String::new();
    let row = |out: &mut String, vals: &mut dyn Iterator<Item = f64>| {
        let line: Vec<String> = vals.map(|x| x.to_string()).collect();
        writeln!(out, "{}", line.join(" ")).unwrap();
    };
    writeln!(out, "{} {} {}", p.num_states, p.num_actions, p.num_obs).unwrap();
    row(&mut out, &mut p.initial_belief.iter().cloned());
    for (name, tables) in [("transition", &p.transition), ("emission", &p.emission)] {
        for (k, m) in tables.iter().enumerate() {
            writeln!(out, "# {name} {k}").unwrap();
            for r in 0..m.nrows() {
                row(&mut out, &mut m.row(r).iter().cloned());
            }
        }
    }
    writeln!(out, "# reward").unwrap();
    for r in 0..p.reward.nrows() {
        row(&mut out, &mut p.reward.row(r).iter().cloned());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = Pomdp::random(3, 2, 4, &mut rng);
        assert_eq!(parse_pomdp_spec(&format_pomdp_spec(&p)).unwrap(), p);
        let t = Pomdp::tiger();
        assert_eq!(parse_pomdp_spec(&format_pomdp_spec(&t)).unwrap(), t);
    }

    #[test]
    fn rejects_short_rows() {
        let err = parse_pomdp_spec("1 1 1\n1\n1\n").unwrap_err();
        assert!(matches!(err, Error::Format(_)));
        assert!(parse_pomdp_spec("1 1 2\n1\n1\n0.5\n0 0\n").is_err());
    }

    #[test]
    fn rejects_non_stochastic() {
        assert!(parse_pomdp_spec("1 1 1\n1\n0.5\n1\n0\n").is_err());
    }
}
