#include "deeptraverse/accounting.hpp"

#include <cstdio>

namespace dt {

namespace {

Index out_extent(Index in, int stride) { return (in - 1) / stride + 1; }

struct Builder {
    CostReport& report;

    void row(std::string path, std::int64_t params, std::int64_t flops) {
        report.total_params += params;
        report.total_flops += flops;
        report.rows.push_back({std::move(path), params, flops});
    }
};

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

std::string fixed2(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

}  // namespace

std::int64_t conv_params(Index in_channels, Index out_channels, Index kernel, Index groups, bool bias) {
    return out_channels * (in_channels / groups) * kernel * kernel + (bias ? out_channels : 0);
}

std::int64_t conv_flops(Index in_channels, Index out_channels, Index kernel, Index groups, bool bias, Index out_h,
                        Index out_w) {
    const std::int64_t outputs = out_channels * out_h * out_w;
    return 2 * (in_channels / groups) * kernel * kernel * outputs + (bias ? outputs : 0);
}

std::int64_t batchnorm_params(Index channels) { return 2 * channels; }

std::int64_t linear_flops(Index in_features, Index out_features, bool bias) {
    return 2 * in_features * out_features + (bias ? out_features : 0);
}

std::int64_t backtrack_params(Index channels, int reduction, Index excitation_floor) {
    const Index hidden = excitation_width(channels, reduction, excitation_floor);
    return conv_params(channels, hidden, 1, 1, true) + conv_params(hidden, channels, 1, 1, true);
}

CostReport cost_report(const ModelConfig& cfg, Index input_h, Index input_w, std::string method, std::string notes) {
    validate(cfg);
    CostReport r;
    r.method = std::move(method);
    r.notes = std::move(notes);
    r.input_height = input_h;
    r.input_width = input_w;
    Builder b{r};
    const Index k = cfg.depthwise_kernel;

    Index h = input_h, w = input_w, c = cfg.stem_channels;
    {
        const Index hw = h * w;
        b.row("stem", conv_params(cfg.input_channels, c, 3, 1, false) + batchnorm_params(c),
              conv_flops(cfg.input_channels, c, 3, 1, false, h, w) + 2 * c * hw + c * hw);
    }

    Index block = 0;
    for (std::size_t s = 0; s < cfg.stages.size(); ++s) {
        const StageConfig& st = cfg.stages[s];
        const int recursion = cfg.stage_recursion(s);
        for (int i = 0; i < st.num_blocks; ++i, ++block) {
            const std::string name = "blocks." + std::to_string(block);
            const int stride = i == 0 ? st.stride : 1;
            const Index cin = c, cout = st.out_channels;
            const Index oh = out_extent(h, stride), ow = out_extent(w, stride);
            const Index hw = oh * ow;

            b.row(name + ".explore.extract",
                  conv_params(cin, cin, k, cin, false) + batchnorm_params(cin) + conv_params(cin, cout, 1, 1, false) +
                      batchnorm_params(cout),
                  conv_flops(cin, cin, k, cin, false, oh, ow) + 2 * cin * hw + cin * hw +
                      conv_flops(cin, cout, 1, 1, false, oh, ow) + 2 * cout * hw);

            const std::int64_t iteration = conv_flops(cout, cout, k, cout, false, oh, ow) + 2 * cout * hw +
                                           cout * hw + conv_flops(cout, cout, 1, 1, false, oh, ow) +
                                           2 * cout * hw + cout * hw;
            b.row(name + ".explore.recursive",
                  conv_params(cout, cout, k, cout, false) + batchnorm_params(cout) +
                      conv_params(cout, cout, 1, 1, false) + batchnorm_params(cout),
                  recursion * iteration);

            const Index hidden = excitation_width(cout, cfg.reduction, cfg.excitation_floor);
            b.row(name + ".backtrack", backtrack_params(cout, cfg.reduction, cfg.excitation_floor),
                  cout * hw + conv_flops(cout, hidden, 1, 1, true, 1, 1) + hidden +
                      conv_flops(hidden, cout, 1, 1, true, 1, 1) + 4 * cout + cout * hw);

            if (cin != cout || stride != 1) {
                b.row(name + ".shortcut", conv_params(cin, cout, 1, 1, false) + batchnorm_params(cout),
                      conv_flops(cin, cout, 1, 1, false, oh, ow) + 2 * cout * hw);
            }
            b.row(name + ".merge", 0, 2 * cout * hw);

            h = oh;
            w = ow;
            c = cout;
        }
    }
    b.row("head", c * cfg.num_classes + cfg.num_classes, c * h * w + linear_flops(c, cfg.num_classes, true));
    return r;
}

std::int64_t count_params(const ModelConfig& cfg) {
    return cost_report(cfg, cfg.input_height, cfg.input_width, "").total_params;
}

std::int64_t count_params(const Model& m) { return count_params(m.config); }

std::int64_t registry_params(const Model& m) {
    std::int64_t total = 0;
    for (const Parameter* p : m.parameters()) total += p->value.numel();
    return total;
}

std::int64_t count_flops(const ModelConfig& cfg, Index input_h, Index input_w) {
    return cost_report(cfg, input_h, input_w, "").total_flops;
}

std::int64_t count_flops(const Model& m, Index input_h, Index input_w) {
    return count_flops(m.config, input_h, input_w);
}

CostTable emit_cost_table(const std::vector<CostReport>& reports) {
    CostTable t;
    auto line = [](const std::string& method, const std::string& input, const std::string& params,
                   const std::string& flops, const std::string& top1, const std::string& top5) {
        char buf[256];
        std::snprintf(buf, sizeof buf, "%-24s %-9s %10s %10s %6s %6s\n", method.c_str(), input.c_str(),
                      params.c_str(), flops.c_str(), top1.c_str(), top5.c_str());
        return std::string(buf);
    };
    t.text += "# FLOPs per image: 1 MAC = 2 FLOPs; batchnorm 2, relu 1, sigmoid 4, pooling 1, add/scale 1, "
              "dropout 0 per element\n";
    t.text += line("method", "input", "params(M)", "FLOPs(G)", "top-1", "top-5");
    t.csv = "method,input_h,input_w,params,flops,notes\n";
    for (const CostReport& r : reports) {
        const std::string input = std::to_string(r.input_height) + "x" + std::to_string(r.input_width);
        t.text += line(r.method, input, fixed2(static_cast<double>(r.total_params) / 1e6),
                       fixed2(static_cast<double>(r.total_flops) / 1e9), "-", "-");
        t.csv += csv_field(r.method) + "," + std::to_string(r.input_height) + "," + std::to_string(r.input_width) +
                 "," + std::to_string(r.total_params) + "," + std::to_string(r.total_flops) + "," +
                 csv_field(r.notes) + "\n";
    }
    return t;
}

std::string format_breakdown(const CostReport& report) {
    std::string out;
    char buf[256];
    std::snprintf(buf, sizeof buf, "%-36s %12s %14s\n", "module", "params", "flops");
    out += buf;
    for (const CostRow& row : report.rows) {
        std::snprintf(buf, sizeof buf, "%-36s %12lld %14lld\n", row.path.c_str(), static_cast<long long>(row.params),
                      static_cast<long long>(row.flops));
        out += buf;
    }
    std::snprintf(buf, sizeof buf, "%-36s %12lld %14lld\n", "total", static_cast<long long>(report.total_params),
                  static_cast<long long>(report.total_flops));
    out += buf;
    return out;
}

}  // namespace dt
