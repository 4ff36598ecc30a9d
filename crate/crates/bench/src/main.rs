//! Prints p50/p90 render latency per output resolution.
//!
//! Usage: `latency [repeats]`

use std::time::Instant;

use conrf_bench::toy_renderer;
use conrf_core::pipeline::RenderSpec;

fn percentile(sorted: &[f64], p: f64) -> f64 {
    sorted[((sorted.len() - 1) as f64 * p).round() as usize]
}

fn main() -> conrf_core::Result<()> {
    let repeats: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(15);
    let dir = std::env::temp_dir().join("conrf_latency_cache");
    let bench = toy_renderer(&dir)?;
    let modes: [(&str, fn(&conrf_bench::Bench, usize) -> RenderSpec); 2] =
        [("text", |b, s| b.text_spec(s)), ("local", |b, s| b.local_spec(s))];
    println!("| mode | resolution | p50 ms | p90 ms |");
    println!("|---|---|---|---|");
    for (mode, make) in modes {
        for side in [64, 128, 256, 512] {
            let spec = make(&bench, side);
            bench.renderer.render(&spec)?;
            let mut times: Vec<f64> = (0..repeats)
                .map(|_| {
                    let t = Instant::now();
                    bench.renderer.render(&spec).map(|_| t.elapsed().as_secs_f64() * 1e3)
                })
                .collect::<conrf_core::Result<_>>()?;
            times.sort_by(f64::total_cmp);
            println!(
                "| {mode} | {side}x{side} | {:.1} | {:.1} |",
                percentile(&times, 0.5),
                percentile(&times, 0.9)
            );
        }
    }
    Ok(())
}
