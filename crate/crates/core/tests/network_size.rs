use dipstop::dip::{build_network, DipConfig};

fn conv(cin: usize, cout: usize, k: usize) -> usize {
    cin * cout * k * k + cout
}

fn bn(c: usize) -> usize {
    2 * c
}

/// Counts weights by walking the scales by hand.
fn oracle(c: &DipConfig) -> usize {
    let mut total = conv(c.filters_up[0], 3, 1);
    let mut cin = c.input_channels;
    for i in 0..c.depth {
        let (d, u, s) = (c.filters_down[i], c.filters_up[i], c.filters_skip[i]);
        total += conv(cin, s, c.kernel_skip[i]) + bn(s);
        total += conv(cin, d, c.kernel_down[i]) + bn(d);
        total += conv(d, d, c.kernel_down[i]) + bn(d);
        let deeper = if i + 1 < c.depth { c.filters_up[i + 1] } else { d };
        total += bn(s + deeper);
        total += conv(s + deeper, u, c.kernel_up[i]) + bn(u);
        total += conv(u, u, 1) + bn(u);
        cin = d;
    }
    total
}

#[test]
fn default_network_matches_hand_count() {
    let config = DipConfig::default();
    let state = build_network(&config, 0, 32, 32).unwrap();
    let n = state.parameter_count().unwrap();
    assert_eq!(n, oracle(&config));
    assert_eq!(n, 2_217_831);
}

#[test]
fn uneven_scales_match_hand_count() {
    let mut config = DipConfig::uniform(3, 8, 2);
    config.filters_down = vec![4, 6, 10];
    config.filters_up = vec![5, 7, 9];
    config.filters_skip = vec![1, 3, 2];
    config.kernel_down = vec![3, 5, 3];
    config.input_channels = 6;
    let state = build_network(&config, 1, 16, 16).unwrap();
    assert_eq!(state.parameter_count().unwrap(), oracle(&config));
}
