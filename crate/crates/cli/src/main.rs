fn main() {
    println!("uvmapid");
}
