//! Drives the `ca` command set in-process, the same way the binary does.

use ca_core::cli::dispatch_with;

fn ca(repo: &str, args: &[&str]) -> i32 {
    let argv: Vec<String> = ["ca", "--repo", repo].into_iter().chain(args.iter().copied()).map(String::from).collect();
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = dispatch_with(argv, &mut out, &mut err);
    println!("$ ca {}  (exit {code})", args.join(" "));
    print!("{}{}", String::from_utf8_lossy(&out), String::from_utf8_lossy(&err));
    code
}

fn main() -> std::io::Result<()> {
    let dir = tempfile::tempdir()?;
    let repo = dir.path().join(".ca");
    let repo = repo.to_str().expect("utf-8 temp path");
    let file = dir.path().join("rows.txt");
    std::fs::write(&file, "alpha\nbeta\n")?;
    let file = file.to_str().expect("utf-8 temp path");

    ca(repo, &["init"]);
    ca(repo, &["artifact", "put", file, "--kind", "data", "--label", "origin=example"]);
    ca(repo, &["artifact", "ls"]);
    ca(repo, &["pins", "set", "main", "--pin", "code=c1", "--pin", "dependencies=d1", "--pin", "deployment=y1", "--pin", "data=x1"]);
    ca(repo, &["pins", "show"]);
    ca(repo, &["--json", "event", "emit", "--source", "code", "--ref", "working/feature", "--version", "c2"]);
    ca(repo, &["event", "ls"]);
    ca(repo, &["run", "show", "no-such-run"]);
    Ok(())
}
