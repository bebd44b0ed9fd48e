//! Regenerates the toy dump used by the tests.
//!
//! `cargo run -p hiddenscope --example make_toy_dump -- crates/service/tests/data/toy.lmd`

#[path = "../tests/common/toy.rs"]
mod toy;

fn main() {
    let out = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "crates/service/tests/data/toy.lmd".into());
    let bytes = toy::toy_bundle().save(&out).expect("write toy dump");
    println!("wrote {out} ({bytes} bytes)");
}
