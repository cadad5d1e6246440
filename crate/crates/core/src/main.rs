use moe_lab::bench::TrackingAllocator;

#[global_allocator]
static ALLOC: TrackingAllocator = TrackingAllocator;

fn main() {
    std::process::exit(moe_lab::cli::dispatch(std::env::args_os()));
}
