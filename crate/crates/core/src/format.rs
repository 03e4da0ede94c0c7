//! On-disk layouts for problems, block stacks and solver metadata.
//!
//! Binary problem layout, all little endian:
//!
//! ```text
//! magic  "OSYNPRB1"                       8 bytes
//! n, d   u64, u64
//! sigma  f64
//! seed   u64
//! truth  n blocks, each d x d row-major   f64
//! upper  blocks (i, j), i < j, i-major, each d x d row-major   f64
//! ```
//!
//! Binary stacks use magic `"OSYNSTK1"`, then `n`, `d` and the blocks. The
//! text layouts print every float in shortest round-trip form, so both
//! encodings are lossless.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::estimators::{MleSolution, SpectralSolution};
use crate::linalg::Mat;
use crate::model::{BlockStack, Observation, SyncProblem};

pub const PROBLEM_MAGIC: &[u8; 8] = b"OSYNPRB1";
pub const STACK_MAGIC: &[u8; 8] = b"OSYNSTK1";
const PROBLEM_TEXT_TAG: &str = "orthosync-problem v1";
const STACK_TEXT_TAG: &str = "orthosync-stack v1";

fn bad(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, k: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(k).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| bad("unexpected end of input"))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn magic(&mut self, want: &[u8; 8]) -> Result<()> {
        if self.take(8)? != want {
            return Err(bad("bad magic"));
        }
        Ok(())
    }
}

fn header_dims(r: &mut Reader) -> Result<(usize, usize)> {
    let n = usize::try_from(r.u64()?).map_err(|_| bad("n does not fit in usize"))?;
    let d = usize::try_from(r.u64()?).map_err(|_| bad("d does not fit in usize"))?;
    if n == 0 || d == 0 {
        return Err(bad(format!("empty dimensions n={n}, d={d}")));
    }
    Ok((n, d))
}

fn stack_floats(n: usize, d: usize) -> Option<usize> {
    n.checked_mul(d)?.checked_mul(d)
}

fn problem_floats(n: usize, d: usize) -> Option<usize> {
    let dd = d.checked_mul(d)?;
    let pairs = n.checked_mul(n - 1)? / 2;
    n.checked_add(pairs)?.checked_mul(dd)
}

/// The payload must be fully present before anything is allocated.
fn expect_remaining(r: &Reader, floats: Option<usize>) -> Result<()> {
    let need = floats
        .and_then(|f| f.checked_mul(8))
        .ok_or_else(|| bad("dimensions overflow"))?;
    let have = r.buf.len() - r.pos;
    if have != need {
        return Err(bad(format!("payload has {have} bytes, expected {need}")));
    }
    Ok(())
}

fn read_block(r: &mut Reader, d: usize) -> Result<Mat> {
    let mut m = Mat::zeros(d, d);
    for a in 0..d {
        for b in 0..d {
            m[(a, b)] = r.f64()?;
        }
    }
    Ok(m)
}

fn push_block(out: &mut Vec<u8>, m: &Mat) {
    for a in 0..m.nrows() {
        for b in 0..m.ncols() {
            out.extend_from_slice(&m[(a, b)].to_le_bytes());
        }
    }
}

fn validate_truth(truth: &BlockStack) -> Result<()> {
    if !truth.is_orthogonal() {
        return Err(Error::NotOrthogonal {
            deviation: truth.orthogonality_defect(),
        });
    }
    Ok(())
}

fn validate_sigma(sigma: f64) -> Result<()> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::InvalidSigma(sigma));
    }
    Ok(())
}

/// Dense observation from its strictly upper blocks.
fn assemble_observation(n: usize, d: usize, upper: &[Mat]) -> Result<Observation> {
    let mut c = Mat::identity(n * d, n * d);
    let mut k = 0;
    for i in 0..n {
        for j in i + 1..n {
            c.view_mut((i * d, j * d), (d, d)).copy_from(&upper[k]);
            c.view_mut((j * d, i * d), (d, d))
                .copy_from(&upper[k].transpose());
            k += 1;
        }
    }
    Observation::from_matrix(n, d, c)
}

pub fn encode_problem(p: &SyncProblem) -> Vec<u8> {
    let (n, d) = (p.n(), p.d());
    let mut out = Vec::with_capacity(40 + 8 * problem_floats(n, d).unwrap_or(0));
    out.extend_from_slice(PROBLEM_MAGIC);
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(&(d as u64).to_le_bytes());
    out.extend_from_slice(&p.sigma.to_le_bytes());
    out.extend_from_slice(&p.seed.to_le_bytes());
    for b in p.truth.blocks() {
        push_block(&mut out, &b);
    }
    for i in 0..n {
        for j in i + 1..n {
            push_block(&mut out, &p.observation.block(i, j));
        }
    }
    out
}

pub fn decode_problem(bytes: &[u8]) -> Result<SyncProblem> {
    let mut r = Reader { buf: bytes, pos: 0 };
    r.magic(PROBLEM_MAGIC)?;
    let (n, d) = header_dims(&mut r)?;
    let sigma = r.f64()?;
    let seed = r.u64()?;
    expect_remaining(&r, problem_floats(n, d))?;
    validate_sigma(sigma)?;
    let truth_blocks = (0..n)
        .map(|_| read_block(&mut r, d))
        .collect::<Result<Vec<_>>>()?;
    let truth = BlockStack::from_blocks(&truth_blocks)?;
    validate_truth(&truth)?;
    let upper = (0..n * (n - 1) / 2)
        .map(|_| read_block(&mut r, d))
        .collect::<Result<Vec<_>>>()?;
    let observation = assemble_observation(n, d, &upper)?;
    Ok(SyncProblem {
        truth,
        sigma,
        observation,
        seed,
    })
}

pub fn encode_stack(s: &BlockStack) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + 8 * s.n() * s.d() * s.d());
    out.extend_from_slice(STACK_MAGIC);
    out.extend_from_slice(&(s.n() as u64).to_le_bytes());
    out.extend_from_slice(&(s.d() as u64).to_le_bytes());
    for b in s.blocks() {
        push_block(&mut out, &b);
    }
    out
}

pub fn decode_stack(bytes: &[u8]) -> Result<BlockStack> {
    let mut r = Reader { buf: bytes, pos: 0 };
    r.magic(STACK_MAGIC)?;
    let (n, d) = header_dims(&mut r)?;
    expect_remaining(&r, stack_floats(n, d))?;
    let blocks = (0..n)
        .map(|_| read_block(&mut r, d))
        .collect::<Result<Vec<_>>>()?;
    BlockStack::from_blocks(&blocks)
}

fn write_rows(out: &mut String, m: &Mat) {
    for a in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|b| format!("{:e}", m[(a, b)])).collect();
        let _ = writeln!(out, "{}", row.join(" "));
    }
}

pub fn problem_to_text(p: &SyncProblem) -> String {
    let (n, d) = (p.n(), p.d());
    let mut out = String::new();
    let _ = writeln!(out, "{PROBLEM_TEXT_TAG}");
    let _ = writeln!(out, "n {n}");
    let _ = writeln!(out, "d {d}");
    let _ = writeln!(out, "sigma {:e}", p.sigma);
    let _ = writeln!(out, "seed {}", p.seed);
    let _ = writeln!(out, "truth");
    for b in p.truth.blocks() {
        write_rows(&mut out, &b);
    }
    let _ = writeln!(out, "upper");
    for i in 0..n {
        for j in i + 1..n {
            write_rows(&mut out, &p.observation.block(i, j));
        }
    }
    out
}

pub fn stack_to_text(s: &BlockStack) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{STACK_TEXT_TAG}");
    let _ = writeln!(out, "n {}", s.n());
    let _ = writeln!(out, "d {}", s.d());
    for b in s.blocks() {
        write_rows(&mut out, &b);
    }
    out
}

struct Lines<'a> {
    it: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str) -> Self {
        Lines {
            it: text.lines().enumerate(),
        }
    }

    /// Next line that is not a `#` comment.
    fn next(&mut self) -> Result<(usize, &'a str)> {
        self.it
            .find(|(_, l)| !l.trim_start().starts_with('#'))
            .map(|(k, l)| (k + 1, l.trim()))
            .ok_or_else(|| bad("unexpected end of text"))
    }

    fn exact(&mut self, want: &str) -> Result<()> {
        let (k, l) = self.next()?;
        if l != want {
            return Err(bad(format!("line {k}: expected `{want}`")));
        }
        Ok(())
    }

    fn field<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        let (k, l) = self.next()?;
        let value = l
            .strip_prefix(key)
            .and_then(|rest| rest.strip_prefix(' '))
            .ok_or_else(|| bad(format!("line {k}: expected `{key} <value>`")))?;
        value
            .trim()
            .parse()
            .map_err(|_| bad(format!("line {k}: bad value for `{key}`")))
    }

    fn block(&mut self, d: usize) -> Result<Mat> {
        let mut m = Mat::zeros(d, d);
        for a in 0..d {
            let (k, l) = self.next()?;
            let vals: Vec<&str> = l.split_whitespace().collect();
            if vals.len() != d {
                return Err(bad(format!(
                    "line {k}: expected {d} values, found {}",
                    vals.len()
                )));
            }
            for (b, v) in vals.iter().enumerate() {
                m[(a, b)] = v
                    .parse()
                    .map_err(|_| bad(format!("line {k}: bad number `{v}`")))?;
            }
        }
        Ok(m)
    }

    fn finish(mut self) -> Result<()> {
        match self
            .it
            .find(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        {
            Some((k, _)) => Err(bad(format!("line {}: trailing content", k + 1))),
            None => Ok(()),
        }
    }
}

/// Caps text dimensions so a short header cannot request a huge allocation;
/// every block still has to be present line by line.
fn text_dims(n: usize, d: usize, text_len: usize) -> Result<()> {
    if n == 0 || d == 0 {
        return Err(bad(format!("empty dimensions n={n}, d={d}")));
    }
    let floats = stack_floats(n, d).ok_or_else(|| bad("dimensions overflow"))?;
    // Every value takes at least two bytes ("0" plus a separator).
    if floats > text_len / 2 {
        return Err(bad("dimensions exceed the text length"));
    }
    Ok(())
}

pub fn parse_problem_text(text: &str) -> Result<SyncProblem> {
    let mut lines = Lines::new(text);
    lines.exact(PROBLEM_TEXT_TAG)?;
    let n: usize = lines.field("n")?;
    let d: usize = lines.field("d")?;
    let sigma: f64 = lines.field("sigma")?;
    let seed: u64 = lines.field("seed")?;
    text_dims(n, d, text.len())?;
    let total = problem_floats(n, d).ok_or_else(|| bad("dimensions overflow"))?;
    if total > text.len() / 2 {
        return Err(bad("dimensions exceed the text length"));
    }
    validate_sigma(sigma)?;
    lines.exact("truth")?;
    let truth_blocks = (0..n).map(|_| lines.block(d)).collect::<Result<Vec<_>>>()?;
    let truth = BlockStack::from_blocks(&truth_blocks)?;
    validate_truth(&truth)?;
    lines.exact("upper")?;
    let upper = (0..n * (n - 1) / 2)
        .map(|_| lines.block(d))
        .collect::<Result<Vec<_>>>()?;
    lines.finish()?;
    let observation = assemble_observation(n, d, &upper)?;
    Ok(SyncProblem {
        truth,
        sigma,
        observation,
        seed,
    })
}

pub fn parse_stack_text(text: &str) -> Result<BlockStack> {
    let mut lines = Lines::new(text);
    lines.exact(STACK_TEXT_TAG)?;
    let n: usize = lines.field("n")?;
    let d: usize = lines.field("d")?;
    text_dims(n, d, text.len())?;
    let blocks = (0..n).map(|_| lines.block(d)).collect::<Result<Vec<_>>>()?;
    lines.finish()?;
    BlockStack::from_blocks(&blocks)
}

/// Reads a problem in either encoding, by its leading bytes.
pub fn read_problem(bytes: &[u8]) -> Result<SyncProblem> {
    if bytes.starts_with(PROBLEM_MAGIC) {
        decode_problem(bytes)
    } else {
        let text = std::str::from_utf8(bytes).map_err(|_| bad("neither binary nor UTF-8 text"))?;
        parse_problem_text(text)
    }
}

/// Reads a block stack in either encoding, by its leading bytes.
pub fn read_stack(bytes: &[u8]) -> Result<BlockStack> {
    if bytes.starts_with(STACK_MAGIC) {
        decode_stack(bytes)
    } else {
        let text = std::str::from_utf8(bytes).map_err(|_| bad("neither binary nor UTF-8 text"))?;
        parse_stack_text(text)
    }
}

fn valid_key(k: &str) -> bool {
    !k.is_empty()
        && k.bytes()
            .all(|b| b.is_ascii_alphanumeric() || b"_.-".contains(&b))
}

/// `key=value` lines; blank lines and lines starting with `#` are comments.
pub fn write_kv(record: &[(String, String)]) -> Result<String> {
    let mut out = String::new();
    for (k, v) in record {
        if !valid_key(k) {
            return Err(bad(format!("invalid key `{k}`")));
        }
        if v.contains(['\n', '\r']) {
            return Err(bad(format!("value of `{k}` spans lines")));
        }
        let _ = writeln!(out, "{k}={v}");
    }
    Ok(out)
}

pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (k, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| bad(format!("line {}: missing `=`", k + 1)))?;
        let key = key.trim();
        if !valid_key(key) {
            return Err(bad(format!("line {}: invalid key `{key}`", k + 1)));
        }
        if value.contains('\r') {
            return Err(bad(format!("line {}: carriage return in value", k + 1)));
        }
        if map
            .insert(key.to_string(), value.trim().to_string())
            .is_some()
        {
            return Err(bad(format!("line {}: duplicate key `{key}`", k + 1)));
        }
    }
    Ok(map)
}

fn join(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| format!("{v:e}"))
        .collect::<Vec<_>>()
        .join(",")
}

pub fn spectral_metadata(spec: &SpectralSolution) -> Vec<(String, String)> {
    vec![
        ("method".into(), "spectral".into()),
        ("iterations".into(), spec.iterations.to_string()),
        ("kappa".into(), format!("{:e}", spec.kappa)),
        ("eigenvalues".into(), join(&spec.eigenvalues)),
    ]
}

pub fn mle_metadata(spec: &SpectralSolution, mle: &MleSolution) -> Vec<(String, String)> {
    vec![
        ("method".into(), "mle".into()),
        ("iterations".into(), mle.iterations.to_string()),
        ("kkt_residual".into(), format!("{:e}", mle.kkt_residual)),
        ("kkt_gap".into(), format!("{:e}", mle.kkt_gap)),
        ("certified".into(), mle.certified.to_string()),
        ("certified_strict".into(), mle.certified_strict.to_string()),
        ("monotone".into(), mle.monotone.to_string()),
        (
            "objective".into(),
            format!("{:e}", mle.objective.last().copied().unwrap_or(f64::NAN)),
        ),
        ("spectral_iterations".into(), spec.iterations.to_string()),
        ("kappa".into(), format!("{:e}", spec.kappa)),
        ("eigenvalues".into(), join(&spec.eigenvalues)),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{generate_problem, sample_ground_truth};

    fn sample(n: usize, d: usize, sigma: f64) -> SyncProblem {
        let z = sample_ground_truth(n, d, 3).unwrap();
        generate_problem(&z, sigma, 4).unwrap()
    }

    #[test]
    fn binary_problem_round_trip() {
        let p = sample(5, 3, 0.37);
        let bytes = encode_problem(&p);
        assert_eq!(bytes.len(), 40 + 8 * (5 + 10) * 9);
        assert_eq!(decode_problem(&bytes).unwrap(), p);
        assert_eq!(read_problem(&bytes).unwrap(), p);
    }

    #[test]
    fn text_problem_round_trip() {
        let p = sample(4, 2, 0.11);
        let text = problem_to_text(&p);
        assert_eq!(parse_problem_text(&text).unwrap(), p);
        assert_eq!(read_problem(text.as_bytes()).unwrap(), p);
    }

    #[test]
    fn stack_round_trips() {
        let z = sample_ground_truth(6, 4, 1).unwrap();
        assert_eq!(decode_stack(&encode_stack(&z)).unwrap(), z);
        assert_eq!(parse_stack_text(&stack_to_text(&z)).unwrap(), z);
        assert_eq!(read_stack(stack_to_text(&z).as_bytes()).unwrap(), z);
        let commented = format!(
            "# seed=1 rng=chacha20 gaussian=ziggurat\n{}# end\n",
            stack_to_text(&z)
        );
        assert_eq!(parse_stack_text(&commented).unwrap(), z);
    }

    #[test]
    fn truncated_and_oversized_inputs_are_rejected() {
        let p = sample(3, 2, 0.1);
        let bytes = encode_problem(&p);
        for cut in [0, 7, 8, 20, 40, bytes.len() - 1] {
            assert!(
                matches!(decode_problem(&bytes[..cut]), Err(Error::Format(_))),
                "cut {cut}"
            );
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(decode_problem(&long).is_err());
        let mut huge = bytes.clone();
        huge[8..16].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(matches!(decode_problem(&huge), Err(Error::Format(_))));
        let mut zero = bytes;
        zero[16..24].copy_from_slice(&0u64.to_le_bytes());
        assert!(matches!(decode_problem(&zero), Err(Error::Format(_))));
    }

    #[test]
    fn invalid_contents_are_rejected() {
        let p = sample(3, 2, 0.1);
        let mut bytes = encode_problem(&p);
        bytes[24..32].copy_from_slice(&(-1.0f64).to_le_bytes());
        assert!(matches!(
            decode_problem(&bytes),
            Err(Error::InvalidSigma(_))
        ));
        let mut bytes = encode_problem(&p);
        bytes[40..48].copy_from_slice(&2.0f64.to_le_bytes());
        assert!(matches!(
            decode_problem(&bytes),
            Err(Error::NotOrthogonal { .. })
        ));
        let mut bytes = encode_problem(&p);
        let last = bytes.len() - 8;
        bytes[last..].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(matches!(decode_problem(&bytes), Err(Error::NonFinite)));
    }

    #[test]
    fn text_errors() {
        let p = sample(3, 2, 0.1);
        let text = problem_to_text(&p);
        assert!(parse_problem_text(&text.replace("sigma", "sigmа")).is_err());
        assert!(parse_problem_text(&format!("{text}1 2\n")).is_err());
        let short: String = text.lines().take(8).map(|l| format!("{l}\n")).collect();
        assert!(parse_problem_text(&short).is_err());
        assert!(parse_stack_text("orthosync-stack v1\nn 99999999999\nd 99999999\n").is_err());
        assert!(parse_stack_text("orthosync-stack v1\nn 1\nd 2\n1 0\n0\n").is_err());
    }

    #[test]
    fn kv_round_trip() {
        let rec = vec![
            ("iterations".to_string(), "12".to_string()),
            ("kkt_gap".to_string(), "1.5e-3".to_string()),
            ("eigenvalues".to_string(), "1e2,9.9e1".to_string()),
        ];
        let text = write_kv(&rec).unwrap();
        let map = parse_kv(&format!("# seed=1\n\n{text}")).unwrap();
        assert_eq!(map.len(), 3);
        assert_eq!(map["kkt_gap"], "1.5e-3");
        assert!(parse_kv("a=1\na=2").is_err());
        assert!(parse_kv("no equals").is_err());
        assert!(parse_kv("bad key=1").is_err());
        assert!(parse_kv("k=a\rb").is_err());
        assert!(write_kv(&[("k".into(), "a\nb".into())]).is_err());
    }
}
