//! Deterministic sample selection for validation runs.

use ca_core::pipeline::subset_select;

fn main() -> ca_core::Result<()> {
    let ids: Vec<String> = (0..1000).map(|i| format!("sample-{i:04}")).collect();
    let a = subset_select(&ids, 0.1, 7)?;
    let b = subset_select(&ids, 0.1, 7)?;
    let c = subset_select(&ids, 0.1, 8)?;
    println!("seed 7 selects {} of {} ids, first few {:?}", a.len(), ids.len(), &a[..5]);
    println!("same seed, same subset: {}", a == b);
    let overlap = a.iter().filter(|id| c.contains(id)).count();
    println!("seed 8 selects {}, overlapping seed 7 on {overlap}", c.len());
    println!("tiny fraction still selects {:?}", subset_select(&ids, 0.0001, 7)?);
    Ok(())
}
