use lfbnet::data::{generate, PhantomKind, PhantomSpec};

fn main() -> lfbnet::Result<()> {
    let kind = match std::env::args().nth(1).as_deref() {
        Some("multicomponent") => PhantomKind::Multicomponent,
        _ => PhantomKind::Cardiac,
    };
    let spec = PhantomSpec { kind, ..Default::default() };
    let sample = &generate(&spec, 1)?[0];
    for y in 0..sample.height {
        let row: String = (0..sample.width).map(|x| b".-o#"[sample.label[y * sample.width + x] as usize] as char).collect();
        println!("{row}");
    }
    Ok(())
}
