use mimalloc::MiMalloc;

// The training step allocates and frees large activation buffers; the
// system allocator returns them to the kernel and refaults them each step.
#[global_allocator]
static GLOBAL: MiMalloc = MiMalloc;

fn main() {
    std::process::exit(dance_cli::run(std::env::args_os()));
}
