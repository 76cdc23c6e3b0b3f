//! Browser bindings: each export builds a fresh in-process rack, runs one
//! benchmark on the virtual clock and returns its results as text.

use splitnet::bench::{self, BenchConfig, BenchMode, Scenario};
use wasm_bindgen::prelude::*;

fn parse_sizes(sizes: &str) -> Result<Vec<usize>, String> {
    sizes
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| format!("bad size {s:?}")))
        .collect()
}

fn config(
    scenario: Scenario,
    mode: &str,
    sizes: &str,
    iterations: usize,
) -> Result<BenchConfig, String> {
    let mode: BenchMode = mode.parse().map_err(|e: splitnet::Error| e.to_string())?;
    let mut c = BenchConfig::new(scenario, mode);
    c.sizes = parse_sizes(sizes)?;
    c.iterations = iterations;
    Ok(c)
}

/// Echo round trips for `mode` (dma, ddio or baseline) at each size in the
/// comma-separated list. Returns CSV.
pub fn echo_csv(mode: &str, sizes: &str, iterations: usize) -> Result<String, String> {
    let c = config(Scenario::Echo, mode, sizes, iterations)?;
    bench::run(&c)
        .map(|r| r.to_csv())
        .map_err(|e| e.to_string())
}

/// Ping-pong over every rack-local route at each size. Returns CSV.
pub fn local_csv(sizes: &str, iterations: usize) -> Result<String, String> {
    let c = config(Scenario::Local, "dma", sizes, iterations)?;
    bench::run(&c)
        .map(|r| r.to_csv())
        .map_err(|e| e.to_string())
}

/// Streams the word count of `text` from a rack mapper to an external
/// reducer. Returns the execution time line followed by `word\tcount` rows.
pub fn word_count(text: &str, mode: &str) -> Result<String, String> {
    let mut c = config(Scenario::WordCount, mode, "1", 1)?;
    c.batch_bytes = 4096;
    let (row, counts) = bench::wordcount_on(&c, text.as_bytes()).map_err(|e| e.to_string())?;
    let mut out = format!(
        "# {} words, {:.2} us virtual time\n",
        counts.values().sum::<u64>(),
        row.elapsed_us
    );
    for (w, n) in counts {
        out.push_str(&format!("{w}\t{n}\n"));
    }
    Ok(out)
}

#[wasm_bindgen(js_name = echo)]
pub fn echo_js(mode: &str, sizes: &str, iterations: usize) -> Result<String, JsValue> {
    echo_csv(mode, sizes, iterations).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = local)]
pub fn local_js(sizes: &str, iterations: usize) -> Result<String, JsValue> {
    local_csv(sizes, iterations).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = wordCount)]
pub fn word_count_js(text: &str, mode: &str) -> Result<String, JsValue> {
    word_count(text, mode).map_err(|e| JsValue::from_str(&e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_returns_one_row_per_size() {
        let csv = echo_csv("ddio", "128, 256", 3).unwrap();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.lines().nth(1).unwrap().starts_with("echo,ddio,128,"));
    }

    #[test]
    fn local_covers_every_route() {
        let csv = local_csv("64", 2).unwrap();
        for route in ["local-pipe", "local-fit", "skel-ddio", "skel-dma"] {
            assert!(csv.contains(route), "{route} missing from {csv}");
        }
    }

    #[test]
    fn word_count_of_a_tiny_text() {
        let out = word_count("a b a", "dma").unwrap();
        assert!(out.contains("a\t2\n") && out.contains("b\t1\n"), "{out}");
        assert!(echo_csv("bogus", "1", 1).is_err());
        assert!(parse_sizes("1,x").is_err());
    }
}
