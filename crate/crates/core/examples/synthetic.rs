//! Trains and evaluates on a synthetic benchmark with the synthetic profile.
//!
//! Usage: `synthetic [key.path=value ...]`, e.g.
//! `synthetic seed=2 model.k_s=1 model.components.dgp=false`.

use std::time::Instant;

use hgrl::config::{self, Override};
use hgrl::experiment::{run_synthetic, SyntheticRun};

fn main() -> hgrl::Result<()> {
    let mut overrides = vec!["profile=synthetic".parse::<Override>()?];
    for arg in std::env::args().skip(1) {
        overrides.push(arg.parse()?);
    }
    let run = SyntheticRun::from_config(&config::resolve(None, &overrides)?)?;
    let t = Instant::now();
    let r = run_synthetic(&run, &mut ())?;
    for e in &r.outcome.epochs {
        println!("epoch {:3} loss {:.4} val HM {:.3}", e.epoch, e.mean_loss, e.val.as_ref().map_or(0.0, |v| v.hm));
    }
    println!(
        "test S {:.3} U {:.3} HM {:.3} AUC {:.3} purity state {:.3} object {:.3} ({:.1}s)",
        r.test.seen,
        r.test.unseen,
        r.test.hm,
        r.test.auc,
        r.purity.state,
        r.purity.object,
        t.elapsed().as_secs_f64()
    );
    Ok(())
}
