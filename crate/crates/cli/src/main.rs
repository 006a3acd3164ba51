fn main() {
    println!("dslm");
}
