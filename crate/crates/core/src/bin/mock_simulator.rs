//! Test child for the JSON-lines simulator protocol; see `asnpe::simulators::mock`.

fn main() {
    std::process::exit(asnpe::simulators::mock::serve(std::env::args().skip(1)));
}
