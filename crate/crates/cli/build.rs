// The acceptance target compiles the core oracle checks as plain functions.
fn main() {
    println!("cargo::rustc-check-cfg=cfg(acceptance)");
    println!("cargo::rustc-cfg=acceptance");
}
