fn main() {
    println!("lap");
}
