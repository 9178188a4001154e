fn main() {
    // im2col GEMMs dispatch to the system CBLAS (OpenBLAS).
    println!("cargo:rustc-link-lib=dylib=openblas");
}
