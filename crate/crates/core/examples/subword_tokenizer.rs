//! Learn a byte-pair sub-word vocabulary from weighted queries.

use nbest_rescore::subword::train_subword;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let corpus = [
        ("play the reytons", 30u64),
        ("play red smoke", 25),
        ("play songs by the reytons", 8),
        ("put on red smoke", 5),
        ("shuffle the playlist", 4),
    ];
    let model = train_subword(corpus.iter().copied(), 60)?;
    println!("vocabulary size {}", model.vocab_size());
    for text in ["play the reytons", "play the rays", "put on røyksopp"] {
        let enc = model.encode(text);
        let units: Vec<&str> = enc.ids.iter().map(|&i| model.unit(i).unwrap_or("?")).collect();
        println!("{text:<18} -> {units:?}{}", if enc.lossy { " (lossy)" } else { "" });
        println!("{:<18} <- {}", "", model.decode(&enc.ids));
    }
    Ok(())
}
