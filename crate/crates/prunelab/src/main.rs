fn main() {
    // CLI wired up once the runner module lands.
}
