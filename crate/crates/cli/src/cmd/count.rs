use std::fmt::Write as _;

use anyhow::Result;
use clap::{Args, ValueEnum};
use denselora_core::analysis::{count_sites, CountPreset, ParamCountReport, SiteDims};
use denselora_core::Site;

use crate::exit::Usage;

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Method {
    All,
    Full,
    Lora,
    Denselora,
}

#[derive(Args, Debug)]
pub struct CountArgs {
    /// Named dimension table, e.g. llama2-7b.
    #[arg(long, conflicts_with_all = ["layers", "d", "k", "module"])]
    pub preset: Option<String>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub layers: Option<u64>,
    /// Output width of a single module type.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..), requires = "k")]
    pub d: Option<u64>,
    /// Input width of a single module type.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..), requires = "d")]
    pub k: Option<u64>,
    /// Module type as SITE:KxD, e.g. U:4096x11008. Repeatable.
    #[arg(long, value_parser = parse_module, conflicts_with_all = ["d", "k"])]
    pub module: Vec<SiteDims>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub rank: u64,
    /// Base model parameter total, for percentages.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub base_total: Option<u64>,
    #[arg(long, value_enum, default_value_t = Method::All)]
    pub method: Method,
    #[arg(long)]
    pub json: bool,
}

fn parse_module(s: &str) -> std::result::Result<SiteDims, String> {
    let (site, dims) = s.split_once(':').ok_or("expected SITE:KxD")?;
    let mut chars = site.chars();
    let (Some(c), None) = (chars.next(), chars.next()) else {
        return Err(format!("bad site {site:?}"));
    };
    let site = Site::from_letter(c).map_err(|e| e.to_string())?;
    let (k, d) = dims.split_once(['x', 'X']).ok_or("expected KxD")?;
    let k: u64 = k.parse().map_err(|e| format!("k: {e}"))?;
    let d: u64 = d.parse().map_err(|e| format!("d: {e}"))?;
    if k == 0 || d == 0 {
        return Err("dimensions must be positive".into());
    }
    Ok(SiteDims { site, k, d })
}

pub fn run(args: &CountArgs) -> Result<()> {
    let report = build(args)?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        print!("{}", render(&report, args.method));
    }
    Ok(())
}

fn build(args: &CountArgs) -> Result<ParamCountReport> {
    let (layers, sites, base_total) = match &args.preset {
        Some(name) => {
            let p = CountPreset::by_name(name)?;
            (p.layers, p.sites, args.base_total.or(p.base_total))
        }
        None => {
            let layers = args.layers.ok_or_else(|| Usage("--layers is required without --preset".into()))?;
            let sites = match (args.d, args.k) {
                (Some(d), Some(k)) => vec![SiteDims { site: Site::Q, k, d }],
                _ if !args.module.is_empty() => args.module.clone(),
                _ => return Err(Usage("give --d and --k, --module, or --preset".into()).into()),
            };
            (layers, sites, args.base_total)
        }
    };
    Ok(count_sites(layers, &sites, args.rank, base_total))
}

fn grouped(n: u64) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(c);
    }
    out
}

fn render(r: &ParamCountReport, method: Method) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "layers {}  rank {}", r.layers, r.rank);
    if r.breakdown.len() > 1 {
        let _ = writeln!(out, "{:<6} {:>7} {:>7} {:>15} {:>13} {:>11}", "module", "k", "d", "full", "lora", "denselora");
        for m in &r.breakdown {
            let _ = writeln!(
                out,
                "{:<6} {:>7} {:>7} {:>15} {:>13} {:>11}",
                m.site,
                m.k,
                m.d,
                grouped(m.full_ft),
                grouped(m.lora),
                grouped(m.denselora)
            );
        }
    }
    let rows = [(Method::Full, "full", r.full_ft), (Method::Lora, "lora", r.lora), (Method::Denselora, "denselora", r.denselora)];
    for (m, name, total) in rows {
        if method != Method::All && method != m {
            continue;
        }
        let _ = write!(out, "{name:<10} {:>15}", grouped(total));
        if let Some(base) = r.base_total {
            let _ = write!(out, "  {:.4}%", 100.0 * total as f64 / base as f64);
        }
        out.push('\n');
    }
    if method == Method::All {
        let _ = writeln!(out, "lora/denselora {:.1}x", r.lora_to_denselora_ratio());
    }
    out
}
