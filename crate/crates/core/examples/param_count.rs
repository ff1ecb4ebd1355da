use lfbnet::arch::{reference_unet_parameter_count, Group, LfbNet, ModelConfig};

fn main() -> lfbnet::Result<()> {
    let net = LfbNet::new(ModelConfig::default(), 0)?;
    for g in net.groups() {
        println!("{g}: {}", net.parameter_count(g));
    }
    println!("train: {}", net.train_parameter_count());
    println!("test: {}", net.test_parameter_count());
    println!("F_d: {}", net.parameter_count(Group::FeedbackDecoder));
    println!("reference U-Net: {}", reference_unet_parameter_count(1, 4));
    Ok(())
}
