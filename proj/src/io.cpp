#include "tvlab/io.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "tvlab/config.hpp"
#include "tvlab/error.hpp"

namespace tvlab {

namespace {

constexpr char kMagic[4] = {'T', 'V', 'F', 'G'};

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
public:
    explicit Reader(const std::string& bytes) : bytes_(bytes) {}

    bool at_end() const { return pos_ == bytes_.size(); }

    std::string take(std::size_t n, const char* what) {
        if (bytes_.size() - pos_ < n)
            throw Error(ErrorCode::truncated_file, std::string("file ends inside ") + what);
        std::string out = bytes_.substr(pos_, n);
        pos_ += n;
        return out;
    }

    std::uint64_t u64(const char* what) { return little_endian(take(8, what)); }
    std::uint32_t u32(const char* what) { return static_cast<std::uint32_t>(little_endian(take(4, what))); }
    std::uint8_t u8(const char* what) { return static_cast<std::uint8_t>(take(1, what)[0]); }

private:
    static std::uint64_t little_endian(const std::string& raw) {
        std::uint64_t v = 0;
        for (std::size_t i = 0; i < raw.size(); ++i)
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(raw[i])) << (8 * i);
        return v;
    }

    const std::string& bytes_;
    std::size_t pos_ = 0;
};

std::map<std::string, std::string> parse_block(const std::string& text) {
    std::map<std::string, std::string> out;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto eq = line.find(" = ");
        if (eq == std::string::npos) throw Error(ErrorCode::io_error, "malformed config line '" + line + "'");
        out[line.substr(0, eq)] = line.substr(eq + 3);
    }
    return out;
}

const std::string& field(const std::map<std::string, std::string>& block, const std::string& key) {
    const auto it = block.find(key);
    if (it == block.end()) throw Error(ErrorCode::io_error, "checkpoint config lacks '" + key + "'");
    return it->second;
}

std::uint64_t field_u64(const std::map<std::string, std::string>& block, const std::string& key) {
    return std::stoull(field(block, key));
}

Matrix column(const Vector& v) {
    return Matrix(v);
}

// Pops the next tensor, checking its name; a missing tensor means the file
// was cut at a tensor boundary.
Matrix next_tensor(std::vector<NamedTensor>& tensors, std::size_t& index, const std::string& name) {
    if (index >= tensors.size()) throw Error(ErrorCode::truncated_file, "missing tensor '" + name + "'");
    if (tensors[index].name != name)
        throw Error(ErrorCode::io_error, "expected tensor '" + name + "', found '" + tensors[index].name + "'");
    return std::move(tensors[index++].value);
}

void expect_consumed(const std::vector<NamedTensor>& tensors, std::size_t index) {
    if (index != tensors.size()) throw Error(ErrorCode::io_error, "unexpected trailing tensor '" + tensors[index].name + "'");
}

void expect_shape(const Matrix& m, Eigen::Index rows, Eigen::Index cols, const std::string& name) {
    if (m.rows() != rows || m.cols() != cols)
        throw Error(ErrorCode::shape_mismatch, "tensor '" + name + "' has shape " + std::to_string(m.rows()) + "x" +
                                                   std::to_string(m.cols()));
}

}  // namespace

std::string encode_container(const Container& c) {
    std::string out(kMagic, 4);
    put_u32(out, kCheckpointVersion);
    out.push_back(static_cast<char>(c.kind));
    put_u64(out, c.config_text.size());
    out += c.config_text;
    for (const auto& t : c.tensors) {
        put_u32(out, static_cast<std::uint32_t>(t.name.size()));
        out += t.name;
        put_u64(out, static_cast<std::uint64_t>(t.value.rows()));
        put_u64(out, static_cast<std::uint64_t>(t.value.cols()));
        for (Eigen::Index r = 0; r < t.value.rows(); ++r)
            for (Eigen::Index col = 0; col < t.value.cols(); ++col)
                put_u64(out, std::bit_cast<std::uint64_t>(t.value(r, col)));
    }
    return out;
}

Container decode_container(const std::string& bytes) {
    Reader in(bytes);
    if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0)
        throw Error(ErrorCode::bad_magic, "not a checkpoint file");
    in.take(4, "magic");
    const std::uint32_t version = in.u32("version");
    if (version != kCheckpointVersion)
        throw Error(ErrorCode::version_mismatch, "checkpoint version " + std::to_string(version) + ", expected " +
                                                     std::to_string(kCheckpointVersion));
    Container c;
    const std::uint8_t kind = in.u8("payload kind");
    if (kind > static_cast<std::uint8_t>(PayloadKind::logit_ltv))
        throw Error(ErrorCode::io_error, "unknown payload kind " + std::to_string(kind));
    c.kind = static_cast<PayloadKind>(kind);
    const std::uint64_t config_len = in.u64("config length");
    c.config_text = in.take(config_len, "config block");
    while (!in.at_end()) {
        NamedTensor t;
        const std::uint32_t name_len = in.u32("tensor name length");
        t.name = in.take(name_len, "tensor name");
        const std::uint64_t rows = in.u64("tensor rows");
        const std::uint64_t cols = in.u64("tensor cols");
        if (cols != 0 && rows > (bytes.size() / 8) / cols)
            throw Error(ErrorCode::truncated_file, "tensor '" + t.name + "' larger than the file");
        t.value.resize(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
        for (std::uint64_t r = 0; r < rows; ++r)
            for (std::uint64_t col = 0; col < cols; ++col)
                t.value(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(col)) =
                    std::bit_cast<double>(in.u64("tensor data"));
        c.tensors.push_back(std::move(t));
    }
    return c;
}

std::string encode_model(const Model& model, const TrainConfig& train) {
    Container c;
    c.kind = PayloadKind::model;
    c.config_text = render_model_config(model.config()) + render_train_config(train) +
                    "digest = " + std::to_string(model.digest()) + "\n";
    Parameters copy = model.params();
    Parameters::visit(copy, [&](const std::string& name, Matrix& m) { c.tensors.push_back({name, m}); });
    return encode_container(c);
}

ModelCheckpoint decode_model(const std::string& bytes) {
    Container c = decode_container(bytes);
    if (c.kind != PayloadKind::model) throw Error(ErrorCode::io_error, "checkpoint does not hold a model");
    const auto block = parse_block(c.config_text);
    Config config;
    for (const auto& [k, v] : block)
        if (k != "digest") config.set(k, v);
    const ModelConfig mc = model_config_from(config);
    const TrainConfig tc = train_config_from(config);

    Parameters params = init_parameters(mc);
    std::size_t index = 0;
    Parameters::visit(params, [&](const std::string& name, Matrix& m) {
        Matrix loaded = next_tensor(c.tensors, index, name);
        expect_shape(loaded, m.rows(), m.cols(), name);
        m = std::move(loaded);
    });
    expect_consumed(c.tensors, index);
    Model model(std::move(params));
    if (model.digest() != field_u64(block, "digest"))
        throw Error(ErrorCode::digest_mismatch, "model tensors do not match the stored digest");
    return ModelCheckpoint{std::move(model), tc};
}

void save_model(const std::string& path, const Model& model, const TrainConfig& train) {
    write_file_atomic(path, encode_model(model, train));
}

ModelCheckpoint load_model(const std::string& path) {
    return decode_model(read_file(path));
}

std::string encode_method(const TaskVectorMethod& method) {
    Container c;
    c.kind = static_cast<PayloadKind>(method.kind());
    std::string text = "model_digest = " + std::to_string(method.model_digest) + "\n" +
                       "demo_digest = " + std::to_string(method.demo_digest) + "\n";
    std::visit(
        [&](const auto& body) {
            using T = std::decay_t<decltype(body)>;
            if constexpr (std::is_same_v<T, LtvLinear>) {
                text += "lambda = " + format_real(body.lambda) + "\nnum_queries = " +
                        std::to_string(body.num_queries) + "\n";
                c.tensors.push_back({"w_star", body.w_star});
            } else if constexpr (std::is_same_v<T, ConstantMap>) {
                c.tensors.push_back({"c", column(body.c)});
            } else if constexpr (std::is_same_v<T, LayerReplace>) {
                text += "layer = " + std::to_string(body.layer) + "\n";
                Vector acc = Eigen::Map<const Vector>(body.layer_accuracy.data(),
                                                      static_cast<Eigen::Index>(body.layer_accuracy.size()));
                c.tensors.push_back({"vector", column(body.vector)});
                c.tensors.push_back({"layer_accuracy", column(acc)});
            } else if constexpr (std::is_same_v<T, MlpMap>) {
                c.tensors.push_back({"w1", body.w1});
                c.tensors.push_back({"w2", body.w2});
            } else {
                text += "lambda = " + format_real(body.lambda) + "\nnum_queries = " +
                        std::to_string(body.num_queries) + "\n";
                c.tensors.push_back({"w_tilde", body.w_tilde});
            }
        },
        method.body);
    for (const auto& [k, v] : method.metadata) {
        if (v.find('\n') != std::string::npos)
            throw Error(ErrorCode::io_error, "metadata value for '" + k + "' contains a newline");
        text += "metadata." + k + " = " + v + "\n";
    }
    c.config_text = std::move(text);
    return encode_container(c);
}

TaskVectorMethod decode_method(const std::string& bytes) {
    Container c = decode_container(bytes);
    if (c.kind == PayloadKind::model) throw Error(ErrorCode::io_error, "checkpoint holds a model, not a method");
    const auto block = parse_block(c.config_text);
    TaskVectorMethod m;
    m.model_digest = field_u64(block, "model_digest");
    m.demo_digest = field_u64(block, "demo_digest");
    for (const auto& [k, v] : block)
        if (k.starts_with("metadata.")) m.metadata[k.substr(9)] = v;

    std::size_t index = 0;
    switch (c.kind) {
        case PayloadKind::ltv: {
            LtvLinear body;
            body.lambda = std::stod(field(block, "lambda"));
            body.num_queries = std::stoi(field(block, "num_queries"));
            body.w_star = next_tensor(c.tensors, index, "w_star");
            expect_shape(body.w_star, body.w_star.rows(), body.w_star.rows(), "w_star");
            m.body = std::move(body);
            break;
        }
        case PayloadKind::constant: {
            Matrix cm = next_tensor(c.tensors, index, "c");
            expect_shape(cm, cm.rows(), 1, "c");
            m.body = ConstantMap{cm.col(0)};
            break;
        }
        case PayloadKind::layer_replace: {
            LayerReplace body;
            body.layer = std::stoi(field(block, "layer"));
            Matrix v = next_tensor(c.tensors, index, "vector");
            expect_shape(v, v.rows(), 1, "vector");
            Matrix acc = next_tensor(c.tensors, index, "layer_accuracy");
            expect_shape(acc, acc.rows(), 1, "layer_accuracy");
            body.vector = v.col(0);
            body.layer_accuracy.assign(acc.data(), acc.data() + acc.rows());
            m.body = std::move(body);
            break;
        }
        case PayloadKind::mlp: {
            MlpMap body;
            body.w1 = next_tensor(c.tensors, index, "w1");
            body.w2 = next_tensor(c.tensors, index, "w2");
            expect_shape(body.w2, body.w1.cols(), body.w1.rows(), "w2");
            m.body = std::move(body);
            break;
        }
        case PayloadKind::logit_ltv: {
            LogitLtv body;
            body.lambda = std::stod(field(block, "lambda"));
            body.num_queries = std::stoi(field(block, "num_queries"));
            body.w_tilde = next_tensor(c.tensors, index, "w_tilde");
            m.body = std::move(body);
            break;
        }
        case PayloadKind::model: break;
    }
    expect_consumed(c.tensors, index);
    return m;
}

void save_method(const std::string& path, const TaskVectorMethod& method) {
    write_file_atomic(path, encode_method(method));
}

TaskVectorMethod load_method(const std::string& path) {
    return decode_method(read_file(path));
}

TaskVectorMethod load_method(const std::string& path, const Model& model) {
    TaskVectorMethod m = load_method(path);
    if (m.model_digest != model.digest())
        throw Error(ErrorCode::digest_mismatch, "method " + path + " was extracted for a different model");
    return m;
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::io_error, "cannot open " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

void write_file_atomic(const std::string& path, const std::string& contents) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error(ErrorCode::io_error, "cannot write " + tmp);
        out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
        if (!out) throw Error(ErrorCode::io_error, "short write to " + tmp);
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw Error(ErrorCode::io_error, "cannot rename " + tmp + " to " + path + ": " + ec.message());
}

std::string format_real(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

CsvTable::CsvTable(std::vector<std::string> header) : header_(std::move(header)) {}

void CsvTable::add_row(std::vector<std::string> cells) {
    if (cells.size() != header_.size())
        throw Error(ErrorCode::shape_mismatch, "CSV row has " + std::to_string(cells.size()) + " cells, header has " +
                                                   std::to_string(header_.size()));
    rows_.push_back(std::move(cells));
}

std::string CsvTable::render() const {
    auto line = [](const std::vector<std::string>& cells) {
        std::string out;
        for (std::size_t i = 0; i < cells.size(); ++i) {
            if (i > 0) out += ',';
            out += cells[i];
        }
        return out + "\n";
    };
    std::string out = line(header_);
    for (const auto& r : rows_) out += line(r);
    return out;
}

}  // namespace tvlab
